//! A desk-scale 4-class corpus whose class signal lives only inside the
//! organ mask.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::pgm::{quantize, write_pgm, Gray8};
use super::{DataError, DatasetManifest, SampleRecord, Split, MANIFEST_HEADER};
use crate::rng::{self, derive_seed, stream};

/// In-organ texture of one class: `0.5 + amplitude · sin(2π·frequency·u/size + φ)`
/// along direction `angle`, plus Gaussian noise. The phase `φ` is drawn per
/// image from `[0, phase_jitter)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    /// Cycles across the image width.
    pub frequency: f64,
    /// Radians.
    pub angle: f64,
    pub amplitude: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub per_class: usize,
    pub seed: u64,
    pub textures: Vec<Texture>,
    pub phase_jitter: f64,
    pub background_level: f64,
    pub background_noise: f64,
    pub train_fraction: f64,
}

pub const MIN_COVERAGE: f64 = 0.2;
pub const MAX_COVERAGE: f64 = 0.5;

impl SyntheticSpec {
    /// `classes` stripe textures at evenly spaced orientations and a
    /// period of 8 pixels, on a mid-gray background of the same mean as the
    /// organ so that brightness alone does not outline it.
    pub fn new(size: usize, per_class: usize, classes: usize, seed: u64) -> Self {
        let textures = (0..classes)
            .map(|c| Texture {
                frequency: size as f64 / 8.0,
                angle: PI * c as f64 / classes as f64,
                amplitude: 0.15,
                noise: 0.05,
            })
            .collect();
        Self {
            size,
            per_class,
            seed,
            textures,
            phase_jitter: 0.0,
            background_level: 0.5,
            background_noise: 0.05,
            train_fraction: 0.8,
        }
    }

    pub fn classes(&self) -> usize {
        self.textures.len()
    }

    pub fn validate(&self, patch_size: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.size < 4 {
            return bad(format!("image size {} is too small", self.size));
        }
        if patch_size == 0 || self.size % patch_size != 0 {
            return bad(format!("image size {} is not divisible by patch size {patch_size}", self.size));
        }
        if self.per_class == 0 || self.textures.is_empty() {
            return bad("need at least one class and one sample per class".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction {} must lie in (0, 1)", self.train_fraction));
        }
        Ok(())
    }
}

fn noise(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Union of two filled, rotated ellipses, redrawn until coverage falls in
/// `[MIN_COVERAGE, MAX_COVERAGE]`.
fn organ_mask(size: usize, r: &mut rng::Rng) -> Vec<bool> {
    let s = size as f64;
    loop {
        let mut bits = vec![false; size * size];
        for _ in 0..2 {
            let cx = r.random_range(0.25..0.75) * s;
            let cy = r.random_range(0.25..0.75) * s;
            let a = r.random_range(0.12..0.35) * s;
            let b = r.random_range(0.12..0.35) * s;
            let t = r.random_range(0.0..PI);
            let (sin, cos) = (libm::sin(t), libm::cos(t));
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let u = (dx * cos + dy * sin) / a;
                    let v = (-dx * sin + dy * cos) / b;
                    if u * u + v * v <= 1.0 {
                        bits[y * size + x] = true;
                    }
                }
            }
        }
        let coverage = bits.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&coverage) {
            return bits;
        }
    }
}

/// One image and its mask, both in `[0, 1]`.
pub(crate) fn render(spec: &SyntheticSpec, index: usize, label: usize) -> (Vec<f64>, Vec<bool>) {
    let size = spec.size;
    let mut r = rng::rng(derive_seed(spec.seed, &[stream::SYNTH, index as u64]));
    let mask = organ_mask(size, &mut r);
    let tex = &spec.textures[label];
    let phase = r.random::<f64>() * spec.phase_jitter;
    let (sin, cos) = (libm::sin(tex.angle), libm::cos(tex.angle));
    let k = 2.0 * PI * tex.frequency / size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            // Noise is drawn for every pixel so the stream does not depend
            // on the mask layout.
            let n = noise(&mut r);
            let v = if mask[y * size + x] {
                let u = x as f64 * cos + y as f64 * sin;
                0.5 + tex.amplitude * libm::sin(k * u + phase) + tex.noise * n
            } else {
                spec.background_level + spec.background_noise * n
            };
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    (pixels, mask)
}

/// Writes `images/`, `masks/` and `manifest.csv` under `out_dir`. Sample `i`
/// has label `i mod K`; each class is split into train and test with its
/// own seeded shuffle.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    spec.validate(1)?;
    let classes = spec.classes();
    let total = spec.per_class * classes;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    }

    let mut splits = vec![Split::Test; total];
    for c in 0..classes {
        let mut members: Vec<usize> = (c..total).step_by(classes).collect();
        members.shuffle(&mut rng::rng(derive_seed(spec.seed, &[stream::SPLIT, c as u64])));
        let n_train = (spec.train_fraction * members.len() as f64).round() as usize;
        for &i in &members[..n_train] {
            splits[i] = Split::Train;
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path).map_err(|e| DataError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| DataError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    };
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;

    let mut records = Vec::with_capacity(total);
    for (i, &split) in splits.iter().enumerate() {
        let label = i % classes;
        let (pixels, mask) = render(spec, i, label);
        let image_rel = format!("images/{i:05}.pgm");
        let mask_rel = format!("masks/{i:05}.pgm");
        let gray = |pixels: Vec<u8>| Gray8 {
            width: spec.size,
            height: spec.size,
            pixels,
        };
        write_pgm(&out_dir.join(&image_rel), &gray(quantize(&pixels)))?;
        write_pgm(&out_dir.join(&mask_rel), &gray(mask.iter().map(|&b| if b { 255 } else { 0 }).collect()))?;
        writer
            .write_record([image_rel.as_str(), mask_rel.as_str(), &label.to_string(), &split.to_string()])
            .map_err(csv_err)?;
        records.push(SampleRecord {
            image_path: out_dir.join(&image_rel),
            mask_path: out_dir.join(&mask_rel),
            label,
            split,
        });
    }
    writer.flush().map_err(|e| DataError::io(&manifest_path, e))?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        classes,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        records,
    })
}
