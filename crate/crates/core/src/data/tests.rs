use std::fs;

use super::pgm::{write_pgm, Gray8};
use super::*;
use crate::model::{self, ModelConfig};
use crate::training::{AdamWConfig, AdamWState};

fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Gray8 {
    Gray8 { width, height, pixels }
}

#[test]
fn nearest_upscale_of_a_corner_bit() {
    let mask = gray(2, 2, vec![255, 0, 0, 0]);
    let m = mask_from_gray(&mask, 4, 4).unwrap();
    let set: Vec<(usize, usize)> = (0..4)
        .flat_map(|y| (0..4).map(move |x| (y, x)))
        .filter(|&(y, x)| m.get(y, x))
        .collect();
    assert_eq!(set, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
}

#[test]
fn same_size_resize_is_exact_scaling() {
    let pixels: Vec<u8> = (0..=255).collect();
    let img = image_from_gray(&gray(16, 16, pixels.clone()), 16, 16).unwrap();
    for (a, &b) in img.pixels().iter().zip(&pixels) {
        assert_eq!(*a, f64::from(b) / 255.0);
    }
}

#[test]
fn bilinear_matches_hand_computed_values() {
    // 2×1 → 4×1: half-pixel centers map output x to input x/2 − 0.25.
    let out = resize_bilinear(&[0.0, 1.0], 2, 1, 4, 1);
    assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    // Downscale 4×4 → 2×2 averages 2×2 blocks.
    let src: Vec<f64> = (0..16).map(|v| v as f64 / 15.0).collect();
    let out = resize_bilinear(&src, 4, 4, 2, 2);
    let expect = |y: usize, x: usize| {
        let i = 2 * y * 4 + 2 * x;
        (src[i] + src[i + 1] + src[i + 4] + src[i + 5]) / 4.0
    };
    for y in 0..2 {
        for x in 0..2 {
            assert!((out[y * 2 + x] - expect(y, x)).abs() < 1e-15);
        }
    }
}

#[test]
fn mask_threshold_is_half_scale() {
    let m = mask_from_gray(&gray(3, 1, vec![127, 128, 255]), 3, 1).unwrap();
    assert_eq!(m.bits(), &[false, true, true]);
}

fn write_pair(dir: &Path, stem: &str) {
    write_pgm(&dir.join(format!("{stem}.pgm")), &gray(4, 4, vec![10; 16])).unwrap();
    write_pgm(&dir.join(format!("{stem}_mask.pgm")), &gray(4, 4, vec![255; 16])).unwrap();
}

fn manifest_with(dir: &Path, rows: &[&str]) -> PathBuf {
    let path = dir.join("manifest.csv");
    let mut text = String::from("image_path,mask_path,label_id,split\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn manifest_resolves_relative_paths_and_counts_classes() {
    let dir = tempfile::tempdir().unwrap();
    for s in ["a", "b", "c", "d"] {
        write_pair(dir.path(), s);
    }
    let path = manifest_with(
        dir.path(),
        &[
            "a.pgm,a_mask.pgm,0,train",
            "b.pgm,b_mask.pgm,1,train",
            "c.pgm,c_mask.pgm,2,test",
            "d.pgm,d_mask.pgm,3,train",
        ],
    );
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.classes, 4);
    assert_eq!(m.records[2].image_path, dir.path().join("c.pgm"));
    assert_eq!(m.split(Split::Test).count(), 1);
    let (img, mask) = load_sample(&m.records[0], 8).unwrap();
    assert_eq!((img.height(), mask.width()), (8, 8));
    assert!(mask.bits().iter().all(|&b| b));
}

#[test]
fn manifest_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a");
    write_pair(dir.path(), "b");
    let load = |rows: &[&str]| load_manifest(&manifest_with(dir.path(), rows)).unwrap_err();

    match load(&["a.pgm,a_mask.pgm,0,train", "b.pgm,missing.pgm,1,train"]) {
        DataError::MissingFile { row: 2, kind: "mask", .. } => {}
        e => panic!("{e}"),
    }
    match load(&["a.pgm,a_mask.pgm,zero,train"]) {
        DataError::BadLabel { row: 1, value } => assert_eq!(value, "zero"),
        e => panic!("{e}"),
    }
    match load(&["a.pgm,a_mask.pgm,-1,train"]) {
        DataError::BadLabel { row: 1, .. } => {}
        e => panic!("{e}"),
    }
    match load(&["a.pgm,a_mask.pgm,0,train", "a.pgm,b_mask.pgm,1,test"]) {
        DataError::DuplicatePath { row: 2, .. } => {}
        e => panic!("{e}"),
    }
    match load(&["a.pgm,a_mask.pgm,0,train", "b.pgm,b_mask.pgm,2,train"]) {
        DataError::LabelGap { missing: 1, classes: 3 } => {}
        e => panic!("{e}"),
    }
    match load(&["a.pgm,a_mask.pgm,0,validation"]) {
        DataError::BadSplit { row: 1, .. } => {}
        e => panic!("{e}"),
    }
    fs::write(dir.path().join("bad.csv"), "image,mask,label,split\n").unwrap();
    assert!(matches!(load_manifest(&dir.path().join("bad.csv")), Err(DataError::Manifest { .. })));
}

#[test]
fn synthetic_corpus_counts_coverage_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(32, 25, 4, 3);
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    assert_eq!(m.records.len(), 100);
    assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 100);
    assert_eq!(fs::read_dir(dir.path().join("masks")).unwrap().count(), 100);
    let reloaded = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(reloaded, m);
    for c in 0..4 {
        let train = m.split(Split::Train).filter(|r| r.label == c).count();
        assert!((train as f64 - 20.0).abs() <= 1.0, "class {c}: {train}");
    }
    for rec in &m.records {
        let (_, mask) = load_sample(rec, 32).unwrap();
        let cov = mask.coverage();
        assert!((0.2..=0.5).contains(&cov), "{cov}");
    }
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(16, 3, 4, 11);
    generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    for rel in ["manifest.csv", "images/00005.pgm", "masks/00011.pgm"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&SyntheticSpec { seed: 12, ..spec }, c.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("images/00005.pgm")).unwrap(),
        fs::read(c.path().join("images/00005.pgm")).unwrap()
    );
}

fn sample_checkpoint(with_optimizer: bool) -> (Checkpoint, ModelConfig) {
    let cfg = ModelConfig::tiny();
    let params = model::init_parameters(&cfg, 5);
    let mut state = AdamWState::new(&params, AdamWConfig::default(), 1e-3);
    state.step = 7;
    state.first.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.125));
    let opt = with_optimizer.then_some(&state);
    (Checkpoint::new(&params, "seed = 5\n", opt), cfg)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for with_optimizer in [false, true] {
        let (ck, cfg) = sample_checkpoint(with_optimizer);
        let path = dir.path().join("model.rgmm");
        save_checkpoint(&path, &ck).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.params(&cfg).unwrap(), model::init_parameters(&cfg, 5));
        let again = dir.path().join("again.rgmm");
        save_checkpoint(&again, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert!(!dir.path().join("model.rgmm.tmp").exists());
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let (ck, _) = sample_checkpoint(true);
    let bytes = ck.to_bytes();
    let p = Path::new("x.rgmm");

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&flipped, p), Err(DataError::Checksum { .. })));

    let mut versioned = bytes.clone();
    versioned[4] = 9;
    match Checkpoint::from_bytes(&versioned, p) {
        Err(e @ DataError::Version { found: 9, .. }) => assert!(e.to_string().contains("version 9")),
        other => panic!("{other:?}"),
    }

    for cut in [3, 10, bytes.len() / 3, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut], p).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. } | DataError::Magic { .. }), "{cut}: {err}");
    }
    assert!(matches!(Checkpoint::from_bytes(b"PNG\x89....", p), Err(DataError::Magic { .. })));
}

#[test]
fn checkpoint_shape_errors_name_the_array() {
    let (ck, mut cfg) = sample_checkpoint(false);
    cfg.encoder.dim = 12;
    cfg.encoder.heads = 3;
    match ck.params(&cfg) {
        Err(DataError::Shape { name, .. }) => assert_eq!(name, "encoder.patch_embed"),
        other => panic!("{other:?}"),
    }

    let (mut ck, cfg) = sample_checkpoint(false);
    ck.arrays.retain(|(n, _)| n != "decoder.norm.gain");
    assert!(matches!(ck.params(&cfg), Err(DataError::MissingArray(n)) if n == "decoder.norm.gain"));

    let (mut ck, cfg) = sample_checkpoint(false);
    ck.arrays.push(("encoder.extra".into(), crate::numerics::Tensor::scalar(1.0)));
    assert!(matches!(ck.params(&cfg), Err(DataError::UnexpectedArray(n)) if n == "encoder.extra"));
}

#[test]
fn checkpoint_encoder_ignores_other_parts() {
    let (ck, cfg) = sample_checkpoint(false);
    assert_eq!(ck.encoder(&cfg).unwrap(), model::init_encoder(&cfg, 5));
}
