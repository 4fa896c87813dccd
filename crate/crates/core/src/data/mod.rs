//! Dataset manifests, image loading and resizing, the synthetic corpus and
//! checkpoint files.

mod checkpoint;
pub mod pgm;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use synthetic::{generate_synthetic, SyntheticSpec, Texture};

use crate::patching::{ImageGrid, MaskImage, PatchError};
use pgm::{read_pgm, Gray8};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("manifest row {row}: {kind} file {} does not exist", path.display())]
    MissingFile { row: usize, kind: &'static str, path: PathBuf },
    #[error("manifest row {row}: bad label id `{value}` (expected a non-negative integer)")]
    BadLabel { row: usize, value: String },
    #[error("manifest row {row}: duplicate image path {}", path.display())]
    DuplicatePath { row: usize, path: PathBuf },
    #[error("manifest row {row}: unknown split `{value}` (expected train or test)")]
    BadSplit { row: usize, value: String },
    #[error("manifest labels skip class {missing}; ids must cover 0..{classes}")]
    LabelGap { missing: usize, classes: usize },
    #[error("image {} is {image_w}×{image_h} but its mask is {mask_w}×{mask_h}", path.display())]
    MaskSize {
        path: PathBuf,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("checkpoint {}: bad magic bytes (not an RGMM checkpoint)", path.display())]
    Magic { path: PathBuf },
    #[error("checkpoint {}: unsupported format version {found} (this build reads version {supported})", path.display())]
    Version { path: PathBuf, found: u32, supported: u32 },
    #[error("checkpoint {}: checksum mismatch, file is corrupt", path.display())]
    Checksum { path: PathBuf },
    #[error("checkpoint {}: truncated while reading {what}", path.display())]
    Truncated { path: PathBuf, what: &'static str },
    #[error("checkpoint {}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("checkpoint array {name}: shape {found:?} does not match the model's {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint has no array {0}")]
    MissingArray(String),
    #[error("checkpoint array {0} is not a parameter of the configured model")]
    UnexpectedArray(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory the manifest's relative paths are resolved against.
    pub root: PathBuf,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub const MANIFEST_HEADER: [&str; 4] = ["image_path", "mask_path", "label_id", "split"];

/// Reads and validates a manifest CSV. Row numbers in diagnostics count
/// data rows from 1.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest_err = |message: String| DataError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| manifest_err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(manifest_err(format!(
            "header must be `{}`, found `{}`",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| manifest_err(format!("row {row_no}: {e}")))?;
        let image_path = root.join(&row[0]);
        let mask_path = root.join(&row[1]);
        let label = row[2].parse::<usize>().map_err(|_| DataError::BadLabel {
            row: row_no,
            value: row[2].to_string(),
        })?;
        let split = row[3].parse::<Split>().map_err(|_| DataError::BadSplit {
            row: row_no,
            value: row[3].to_string(),
        })?;
        if !seen.insert(image_path.clone()) {
            return Err(DataError::DuplicatePath {
                row: row_no,
                path: image_path,
            });
        }
        for (kind, p) in [("image", &image_path), ("mask", &mask_path)] {
            if !p.is_file() {
                return Err(DataError::MissingFile {
                    row: row_no,
                    kind,
                    path: p.clone(),
                });
            }
        }
        records.push(SampleRecord {
            image_path,
            mask_path,
            label,
            split,
        });
    }
    if records.is_empty() {
        return Err(manifest_err("no samples".into()));
    }
    let classes = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let present: HashSet<usize> = records.iter().map(|r| r.label).collect();
    if let Some(missing) = (0..classes).find(|c| !present.contains(c)) {
        return Err(DataError::LabelGap { missing, classes });
    }
    Ok(DatasetManifest {
        root,
        classes,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        records,
    })
}

/// Bilinear resampling of `[0, 1]` values with half-pixel centers and edge
/// clamping. Equal sizes copy the input unchanged.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    if (w, h) == (out_w, out_h) {
        return src.to_vec();
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            // Convex weights, but rounding can step past the input range.
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Nearest-neighbor resampling: output pixel `x` reads input `⌊x·in/out⌋`.
pub fn resize_nearest<T: Copy>(src: &[T], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let y = oy * h / out_h;
        for ox in 0..out_w {
            out.push(src[y * w + ox * w / out_w]);
        }
    }
    out
}

/// Mask bits are set where the resized 8-bit value is at least half scale.
pub const MASK_THRESHOLD: f64 = 0.5;

pub fn image_from_gray(img: &Gray8, out_w: usize, out_h: usize) -> Result<ImageGrid> {
    let unit: Vec<f64> = img.pixels.iter().map(|&v| f64::from(v) / 255.0).collect();
    let resized = resize_bilinear(&unit, img.width, img.height, out_w, out_h);
    Ok(ImageGrid::new(out_h, out_w, 1, resized)?)
}

pub fn mask_from_gray(img: &Gray8, out_w: usize, out_h: usize) -> Result<MaskImage> {
    let resized = resize_nearest(&img.pixels, img.width, img.height, out_w, out_h);
    let bits = resized.iter().map(|&v| f64::from(v) / 255.0 >= MASK_THRESHOLD).collect();
    Ok(MaskImage::new(out_h, out_w, bits)?)
}

/// Decodes an image/mask pair and resizes both to `size × size`.
pub fn load_sample(rec: &SampleRecord, size: usize) -> Result<(ImageGrid, MaskImage)> {
    let img = read_pgm(&rec.image_path)?;
    let mask = read_pgm(&rec.mask_path)?;
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(DataError::MaskSize {
            path: rec.image_path.clone(),
            image_w: img.width,
            image_h: img.height,
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    Ok((image_from_gray(&img, size, size)?, mask_from_gray(&mask, size, size)?))
}

/// A decoded, resized sample.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub image: ImageGrid,
    pub mask: MaskImage,
    pub label: usize,
    pub split: Split,
}

pub fn load_split(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Vec<LoadedSample>> {
    manifest
        .split(split)
        .map(|rec| {
            let (image, mask) = load_sample(rec, size)?;
            Ok(LoadedSample {
                image,
                mask,
                label: rec.label,
                split: rec.split,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
