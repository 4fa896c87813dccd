use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
image_size = 16
patch_size = 4
encoder_layers = 2
encoder_dim = 8
encoder_heads = 2
encoder_mlp_dim = 16
decoder_layers = 1
decoder_dim = 8
decoder_heads = 2
decoder_mlp_dim = 16
pretrain_epochs = 2
finetune_epochs = 2
batch_size = 4
base_lr = 0.5
mask_ratio = 0.25
synth_size = 16
synth_per_class = 5
";

fn rgmim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgmim")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rgmim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        let f = Self { dir };
        ok(&["gen-data", "--config", &f.cfg(), "--out", &f.path("data"), "--seed", "4"]);
        f
    }

    fn path(&self, rel: &str) -> String {
        s(&self.dir.path().join(rel)).to_string()
    }

    fn cfg(&self) -> String {
        self.path("tiny.cfg")
    }

    fn manifest(&self) -> String {
        self.path("data/manifest.csv")
    }
}

#[test]
fn full_pipeline() {
    let f = Fixture::new();
    assert!(Path::new(&f.path("data/resolved-config.txt")).is_file());
    assert_eq!(fs::read_to_string(f.manifest()).unwrap().lines().count(), 21);

    let out = ok(&["pretrain", "--config", &f.cfg(), "--manifest", &f.manifest(), "--out", &f.path("pre")]);
    assert!(out.contains("pretrain epoch 2"));
    for file in ["checkpoint.rgmm", "metrics.csv", "resolved-config.txt"] {
        assert!(Path::new(&f.path("pre")).join(file).is_file(), "{file}");
    }
    let metrics = fs::read_to_string(f.path("pre/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,accuracy,seconds,clamped_plans\n1,pretrain,"));

    ok(&[
        "finetune",
        "--config",
        &f.cfg(),
        "--manifest",
        &f.manifest(),
        "--checkpoint",
        &f.path("pre/checkpoint.rgmm"),
        "--out",
        &f.path("ft"),
        "--label-fraction",
        "0.5",
    ]);
    let resolved = fs::read_to_string(f.path("ft/resolved-config.txt")).unwrap();
    assert!(resolved.contains("label_fraction = 0.5\n"));

    let out = ok(&[
        "eval",
        "--config",
        &f.cfg(),
        "--manifest",
        &f.manifest(),
        "--checkpoint",
        &f.path("ft/checkpoint.rgmm"),
        "--out",
        &f.path("eval"),
    ]);
    assert!(out.starts_with("test accuracy "));
    let confusion = fs::read_to_string(f.path("eval/confusion.csv")).unwrap();
    let total: usize = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<usize>().unwrap()))
        .sum();
    assert_eq!(total, 4);

    // Evaluating a pretraining checkpoint has no head to score with.
    let out = rgmim(&[
        "eval",
        "--config",
        &f.cfg(),
        "--manifest",
        &f.manifest(),
        "--checkpoint",
        &f.path("pre/checkpoint.rgmm"),
        "--out",
        &f.path("eval2"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let f = Fixture::new();
    let args = ["--config", &f.cfg(), "--manifest", &f.manifest(), "--seed", "9", "--epochs", "1"];
    ok(&[&["pretrain"][..], &args, &["--out", &f.path("a")]].concat());
    ok(&["pretrain", "--config", &f.path("a/resolved-config.txt"), "--out", &f.path("b")]);
    assert_eq!(fs::read(f.path("a/checkpoint.rgmm")).unwrap(), fs::read(f.path("b/checkpoint.rgmm")).unwrap());
    assert_eq!(fs::read(f.path("a/metrics.csv")).unwrap(), fs::read(f.path("b/metrics.csv")).unwrap());
}

#[test]
fn mask_viz_writes_three_images() {
    let f = Fixture::new();
    let out = ok(&[
        "mask-viz",
        "--config",
        &f.cfg(),
        "--manifest",
        &f.manifest(),
        "--out",
        &f.path("viz"),
        "--mask-ratio",
        "0.5",
    ]);
    assert!(out.starts_with("masked 8 of 16 patches"), "{out}");
    for name in ["original.pgm", "overlay.pgm", "masked.pgm"] {
        let bytes = fs::read(Path::new(&f.path("viz")).join(name)).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"), "{name}");
        assert_eq!(bytes.len(), 13 + 256);
    }
    let masked = fs::read(f.path("viz/masked.pgm")).unwrap();
    assert_eq!(masked[13..].iter().filter(|&&v| v == 128).count() >= 8 * 16, true);
}

#[test]
fn sweep_emits_requested_grid() {
    let f = Fixture::new();
    ok(&[
        "sweep",
        "--config",
        &f.cfg(),
        "--manifest",
        &f.manifest(),
        "--out",
        &f.path("sweep"),
        "--epochs",
        "1",
    ]);
    let csv = fs::read_to_string(f.path("sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,sigma,accuracy");
    assert_eq!(lines.len(), 13);
    assert!(lines[1].starts_with("region,0.15,"));
    assert!(lines[12].starts_with("random,0.90,"));
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--seed", "7"]);
    let last = out.lines().last().unwrap();
    let err: f64 = last.strip_prefix("max relative error ").unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nmasking_ration = 0.5\n").unwrap();
    let out = rgmim(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("masking_ration"));

    let out = rgmim(&["pretrain", "--mask-ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    let out = rgmim(&["pretrain", "--mask-strategy", "checkerboard"]);
    assert_eq!(out.status.code(), Some(1));
    let out = rgmim(&["pretrain"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "image_path,mask_path,label_id,split\nnope.pgm,nope.pgm,0,train\n").unwrap();
    let out = rgmim(&["pretrain", "--manifest", s(&manifest), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 1"));
}

#[test]
fn help_on_every_subcommand_lists_all_flags() {
    let flags = [
        "--config",
        "--manifest",
        "--out",
        "--seed",
        "--mask-strategy",
        "--mask-ratio",
        "--patch-size",
        "--epochs",
        "--batch",
        "--lr",
        "--label-fraction",
        "--freeze-encoder",
    ];
    for sub in ["gen-data", "pretrain", "finetune", "eval", "mask-viz", "sweep", "grad-check"] {
        let out = rgmim(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help lacks {flag}");
        }
    }
}
