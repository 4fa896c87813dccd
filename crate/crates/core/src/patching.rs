//! Patch geometry and masking plans.
//!
//! An image of `H × W × C` pixels is cut into `n = HW / T²` square patches in
//! raster order. Each patch flattens to `T²·C` values, channel-last and then
//! row-major inside the patch. A patch is *valid* when the organ mask covers
//! more than a threshold fraction of its footprint; region-guided masking
//! draws the masked set from valid patches only.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PatchError {
    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    Geometry {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("image is {image_h}x{image_w} but its mask is {mask_h}x{mask_w}")]
    MaskDims {
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error("invalid image: {0}")]
    Image(String),
    #[error("masking ratio {0} must lie strictly between 0 and 1")]
    Ratio(f64),
    #[error("overlap threshold {0} must lie in [0, 1)")]
    Threshold(f64),
    #[error("valid patch index {index} out of range for {n} patches")]
    ValidIndex { index: usize, n: usize },
    #[error("region-guided masking needs at least one valid patch; the organ mask covers none")]
    EmptyValidSet,
    #[error("patch {index} override has {got} values, expected {expected}")]
    OverrideLength {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("override index {index} out of range for {n} patches")]
    OverrideIndex { index: usize, n: usize },
    #[error("unknown masking strategy `{0}` (expected `region` or `random`)")]
    Strategy(String),
}

type Result<T> = std::result::Result<T, PatchError>;

/// Image with `H × W × C` pixels in `[0, 1]`, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(PatchError::Image(format!("empty extent {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(PatchError::Image(format!(
                "{height}x{width}x{channels} needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(PatchError::Image(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Binary organ mask; `true` marks the region of interest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(PatchError::Image(format!(
                "mask {height}x{width} with {} bits",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn coverage(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn ensure_matches(&self, image: &ImageGrid) -> Result<()> {
        if self.height != image.height || self.width != image.width {
            return Err(PatchError::MaskDims {
                image_h: image.height,
                image_w: image.width,
                mask_h: self.height,
                mask_w: self.width,
            });
        }
        Ok(())
    }
}

/// An image cut into `n` flattened patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `T²·C`
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch_size
    }

    /// `(row, col)` of patch `i` in the patch grid.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.grid_cols(), i % self.grid_cols())
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let p = self.patch_len();
        &self.values[i * p..(i + 1) * p]
    }

    /// Concatenation of the selected patches, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.patch(i).iter().copied()).collect()
    }
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(PatchError::Geometry {
            height,
            width,
            patch,
        });
    }
    Ok(())
}

pub fn split_into_patches(img: &ImageGrid, patch_size: usize) -> Result<PatchGrid> {
    check_divisible(img.height, img.width, patch_size)?;
    let t = patch_size;
    let c = img.channels;
    let (rows, cols) = (img.height / t, img.width / t);
    let mut values = Vec::with_capacity(img.pixels.len());
    for pr in 0..rows {
        for pc in 0..cols {
            for y in pr * t..(pr + 1) * t {
                let start = (y * img.width + pc * t) * c;
                values.extend_from_slice(&img.pixels[start..start + t * c]);
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        height: img.height,
        width: img.width,
        channels: c,
        values,
    })
}

/// Inverse of [`split_into_patches`], substituting the given patches.
pub fn reassemble_image(pg: &PatchGrid, overrides: &[(usize, &[f64])]) -> Result<ImageGrid> {
    let n = pg.len();
    let p = pg.patch_len();
    let mut values = pg.values.clone();
    for &(index, patch) in overrides {
        if index >= n {
            return Err(PatchError::OverrideIndex { index, n });
        }
        if patch.len() != p {
            return Err(PatchError::OverrideLength {
                index,
                got: patch.len(),
                expected: p,
            });
        }
        values[index * p..(index + 1) * p].copy_from_slice(patch);
    }
    let (t, c, w) = (pg.patch_size, pg.channels, pg.width);
    let mut pixels = vec![0.0; values.len()];
    for i in 0..n {
        let (pr, pc) = pg.coords(i);
        for dy in 0..t {
            let src = i * p + dy * t * c;
            let dst = ((pr * t + dy) * w + pc * t) * c;
            pixels[dst..dst + t * c].copy_from_slice(&values[src..src + t * c]);
        }
    }
    ImageGrid::new(pg.height, pg.width, c, pixels)
}

/// Indices of patches whose mask coverage is strictly greater than
/// `threshold`, ascending.
pub fn compute_valid_set(mask: &MaskImage, patch_size: usize, threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(PatchError::Threshold(threshold));
    }
    check_divisible(mask.height, mask.width, patch_size)?;
    let t = patch_size;
    let cols = mask.width / t;
    let mut counts = vec![0usize; (mask.height / t) * cols];
    for y in 0..mask.height {
        let row = &mask.bits[y * mask.width..(y + 1) * mask.width];
        for (pc, chunk) in row.chunks(t).enumerate() {
            counts[(y / t) * cols + pc] += chunk.iter().filter(|&&b| b).count();
        }
    }
    let area = (t * t) as f64;
    Ok(counts
        .iter()
        .enumerate()
        .filter(|(_, &k)| k as f64 / area > threshold)
        .map(|(i, _)| i)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskingStrategy {
    /// Mask only patches that overlap the organ mask.
    RegionGuided,
    /// Mask uniformly over all patches.
    Random,
}

impl fmt::Display for MaskingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RegionGuided => "region",
            Self::Random => "random",
        })
    }
}

impl FromStr for MaskingStrategy {
    type Err = PatchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region" => Ok(Self::RegionGuided),
            "random" => Ok(Self::Random),
            other => Err(PatchError::Strategy(other.to_string())),
        }
    }
}

/// Partition of `0..n` into masked and unmasked patch indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingPlan {
    pub sigma: f64,
    pub n: usize,
    pub valid: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
    /// Ascending; includes invalid patches.
    pub unmasked: Vec<usize>,
    pub strategy: MaskingStrategy,
    pub seed: u64,
    /// Set when fewer than `floor(n·sigma)` valid patches existed and all of
    /// them were masked.
    pub clamped: bool,
}

impl MaskingPlan {
    pub fn m(&self) -> usize {
        self.masked.len()
    }

    pub fn u(&self) -> usize {
        self.unmasked.len()
    }
}

/// `floor(n·sigma)`, tolerant of decimal ratios that are not exactly
/// representable (0.29 · 100 is 28.999…).
pub fn masked_count(n: usize, sigma: f64) -> usize {
    ((n as f64) * sigma + 1e-9).floor() as usize
}

pub fn build_masking_plan(
    n: usize,
    valid: &[usize],
    sigma: f64,
    strategy: MaskingStrategy,
    seed: u64,
) -> Result<MaskingPlan> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(PatchError::Ratio(sigma));
    }
    if n == 0 {
        return Err(PatchError::Geometry {
            height: 0,
            width: 0,
            patch: 0,
        });
    }
    if let Some(&index) = valid.iter().find(|&&i| i >= n) {
        return Err(PatchError::ValidIndex { index, n });
    }
    let mut valid = valid.to_vec();
    valid.sort_unstable();
    valid.dedup();

    let m = masked_count(n, sigma);
    let mut rng = rng::rng(seed);
    let mut clamped = false;
    let mut masked = match strategy {
        MaskingStrategy::RegionGuided => {
            if valid.is_empty() {
                return Err(PatchError::EmptyValidSet);
            }
            if valid.len() < m {
                clamped = true;
                valid.clone()
            } else {
                let mut pool = valid.clone();
                pool.shuffle(&mut rng);
                pool.truncate(m);
                pool
            }
        }
        MaskingStrategy::Random => {
            let mut pool: Vec<usize> = (0..n).collect();
            pool.shuffle(&mut rng);
            pool.truncate(m);
            pool
        }
    };
    masked.sort_unstable();

    let mut is_masked = vec![false; n];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let unmasked = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskingPlan {
        sigma,
        n,
        valid,
        masked,
        unmasked,
        strategy,
        seed,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageGrid {
        let n = h * w * c;
        ImageGrid::new(h, w, c, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn patch_counts_at_full_scale() {
        let img = ImageGrid::filled(224, 224, 1, 0.2).unwrap();
        let pg = split_into_patches(&img, 16).unwrap();
        assert_eq!(pg.len(), 196);
        assert_eq!(pg.patch_len(), 256);
    }

    #[test]
    fn small_round_trip() {
        let img = ramp(16, 16, 1);
        let pg = split_into_patches(&img, 4).unwrap();
        assert_eq!(pg.len(), 16);
        assert_eq!(reassemble_image(&pg, &[]).unwrap(), img);
    }

    #[test]
    fn patch_layout_is_channel_last_row_major() {
        let img = ramp(4, 4, 2);
        let pg = split_into_patches(&img, 2).unwrap();
        // Patch 1 covers rows 0..2, cols 2..4.
        let expected: Vec<f64> = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .flat_map(|&(y, x)| (0..2).map(move |c| (y, x, c)))
            .map(|(y, x, c)| img.get(y, x, c))
            .collect();
        assert_eq!(pg.patch(1), expected.as_slice());
        assert_eq!(pg.coords(3), (1, 1));
    }

    #[test]
    fn non_divisible_geometry() {
        let img = ImageGrid::filled(15, 16, 1, 0.0).unwrap();
        assert_eq!(
            split_into_patches(&img, 4).unwrap_err(),
            PatchError::Geometry {
                height: 15,
                width: 16,
                patch: 4
            }
        );
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageGrid::new(1, 2, 1, vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn valid_set_extremes() {
        let ones = MaskImage::new(8, 8, vec![true; 64]).unwrap();
        assert_eq!(compute_valid_set(&ones, 4, 0.0).unwrap(), vec![0, 1, 2, 3]);
        let zeros = MaskImage::new(8, 8, vec![false; 64]).unwrap();
        assert!(compute_valid_set(&zeros, 4, 0.0).unwrap().is_empty());
    }

    #[test]
    fn valid_set_threshold_is_strict() {
        let mut bits = vec![false; 16];
        bits[0] = true;
        bits[1] = true; // patch 0 is half covered
        let mask = MaskImage::new(4, 4, bits).unwrap();
        assert_eq!(compute_valid_set(&mask, 2, 0.0).unwrap(), vec![0]);
        assert!(compute_valid_set(&mask, 2, 0.5).unwrap().is_empty());
        assert!(compute_valid_set(&mask, 2, 1.0).is_err());
    }

    #[test]
    fn mask_dimension_mismatch() {
        let img = ImageGrid::filled(8, 8, 1, 0.0).unwrap();
        let mask = MaskImage::new(8, 4, vec![false; 32]).unwrap();
        assert!(matches!(mask.ensure_matches(&img), Err(PatchError::MaskDims { .. })));
    }

    #[test]
    fn full_scale_plan_counts() {
        let valid: Vec<usize> = (0..196).collect();
        let plan = build_masking_plan(196, &valid, 0.75, MaskingStrategy::RegionGuided, 3).unwrap();
        assert_eq!((plan.m(), plan.u()), (147, 49));
        assert!(!plan.clamped);
    }

    #[test]
    fn clamping_masks_every_valid_patch() {
        let valid: Vec<usize> = (3..13).collect();
        let plan = build_masking_plan(16, &valid, 0.75, MaskingStrategy::RegionGuided, 9).unwrap();
        assert_eq!(plan.m(), 10);
        assert_eq!(plan.u(), 6);
        assert!(plan.clamped);
        assert_eq!(plan.masked, valid);
    }

    #[test]
    fn region_guided_needs_valid_patches() {
        assert_eq!(
            build_masking_plan(16, &[], 0.5, MaskingStrategy::RegionGuided, 0).unwrap_err(),
            PatchError::EmptyValidSet
        );
        // Random masking ignores the valid set.
        assert!(build_masking_plan(16, &[], 0.5, MaskingStrategy::Random, 0).is_ok());
    }

    #[test]
    fn ratio_bounds() {
        for sigma in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(build_masking_plan(4, &[0], sigma, MaskingStrategy::Random, 0).is_err());
        }
    }

    #[test]
    fn plan_is_deterministic_in_seed() {
        let valid: Vec<usize> = (0..40).step_by(3).collect();
        let first = build_masking_plan(64, &valid, 0.15, MaskingStrategy::RegionGuided, 42).unwrap();
        for _ in 0..1000 {
            let again = build_masking_plan(64, &valid, 0.15, MaskingStrategy::RegionGuided, 42).unwrap();
            assert_eq!(again, first);
        }
    }

    #[test]
    fn region_guided_selection_is_uniform_over_valid() {
        let valid: Vec<usize> = vec![1, 4, 5, 7, 8, 10, 12, 13, 14, 15];
        let trials = 10_000;
        let mut hits = [0usize; 16];
        let mut m = 0;
        for seed in 0..trials {
            let plan = build_masking_plan(16, &valid, 0.3, MaskingStrategy::RegionGuided, seed).unwrap();
            m = plan.m();
            plan.masked.iter().for_each(|&i| hits[i] += 1);
        }
        let p = m as f64 / valid.len() as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            if valid.contains(&i) {
                assert!((freq - p).abs() < 3.0 * se, "index {i}: {freq} vs {p}");
            } else {
                assert_eq!(h, 0);
            }
        }
    }

    #[test]
    fn overrides_replace_patches() {
        let img = ramp(8, 8, 1);
        let pg = split_into_patches(&img, 4).unwrap();
        let gray = vec![0.5; 16];
        let all: Vec<(usize, &[f64])> = (0..4).map(|i| (i, gray.as_slice())).collect();
        let flat = reassemble_image(&pg, &all).unwrap();
        assert!(flat.pixels().iter().all(|&p| p == 0.5));
        assert!(matches!(
            reassemble_image(&pg, &[(0, &gray[..3])]),
            Err(PatchError::OverrideLength { .. })
        ));
        assert!(matches!(
            reassemble_image(&pg, &[(4, &gray[..])]),
            Err(PatchError::OverrideIndex { .. })
        ));
    }

    #[test]
    fn strategy_names() {
        assert_eq!("region".parse::<MaskingStrategy>().unwrap(), MaskingStrategy::RegionGuided);
        assert_eq!(MaskingStrategy::Random.to_string(), "random");
        assert!("rgmim".parse::<MaskingStrategy>().is_err());
    }
}
