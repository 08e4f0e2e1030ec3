//! Tissue masking and patch-grid extraction for raster images.
//!
//! The saturation channel is thresholded with Otsu's method over a 256-bin
//! histogram, then a non-overlapping `P × P` grid anchored at the origin is
//! filtered by tissue coverage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 256;
pub const DEFAULT_PATCH_SIZE: usize = 512;
pub const DEFAULT_COVERAGE: f64 = 0.5;

/// RGB image with channels in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig("image dimensions must be >= 1".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidConfig(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidConfig("channel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Result<Self> {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, pixels)
    }

    /// Decodes a PNG; 8-bit channels are divided by 255.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
        let rgb = decoded.to_rgb8();
        let pixels = rgb
            .pixels()
            .map(|p| p.0.map(|c| f64::from(c) / 255.0))
            .collect();
        Self::new(rgb.width() as usize, rgb.height() as usize, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }
}

/// Per-pixel scalar values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl TissueMask {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn tissue_pixels(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub patch_size: usize,
    pub coverage_threshold: f64,
    pub width: usize,
    pub height: usize,
}

/// Kept patches as `(row, col)` pixel coordinates of their top-left corner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub header: GridHeader,
    pub kept: Vec<[usize; 2]>,
}

impl PatchGrid {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// HSV saturation `(max − min) / max`, zero where `max = 0`.
pub fn rgb_to_saturation(image: &RasterImage) -> ScalarField {
    let values = image
        .pixels
        .iter()
        .map(|[r, g, b]| {
            let max = r.max(*g).max(*b);
            let min = r.min(*g).min(*b);
            if max > 0.0 {
                (max - min) / max
            } else {
                0.0
            }
        })
        .collect();
    ScalarField {
        width: image.width,
        height: image.height,
        values,
    }
}

/// Histogram bin of a value; bin `t` covers `(t/256, (t+1)/256]`, bin 0 also holds 0.
pub fn histogram_bin(value: f64) -> usize {
    let scaled = (value * HISTOGRAM_BINS as f64).ceil() as i64 - 1;
    scaled.clamp(0, HISTOGRAM_BINS as i64 - 1) as usize
}

pub fn histogram(field: &ScalarField) -> [u64; HISTOGRAM_BINS] {
    let mut counts = [0u64; HISTOGRAM_BINS];
    for &v in &field.values {
        counts[histogram_bin(v)] += 1;
    }
    counts
}

/// Between-class variance (scaled by `n²`) of cutting after bin `cut`.
///
/// Zero when either side is empty. Evaluated identically wherever it is
/// called so that ties compare exactly.
pub fn between_class_variance(total: u64, total_sum: u64, below: u64, below_sum: u64) -> f64 {
    let above = total - below;
    if below == 0 || above == 0 {
        return 0.0;
    }
    let diff = below_sum as f64 * total as f64 - total_sum as f64 * below as f64;
    diff * diff / (below as f64 * above as f64)
}

/// Best cut over a histogram; ties go to the lowest bin. `None` when no cut separates anything.
pub fn otsu_cut(counts: &[u64; HISTOGRAM_BINS]) -> Option<usize> {
    let total: u64 = counts.iter().sum();
    let total_sum: u64 = counts.iter().enumerate().map(|(i, c)| i as u64 * c).sum();
    let (mut below, mut below_sum) = (0u64, 0u64);
    let mut best: Option<(usize, f64)> = None;
    for (cut, &count) in counts.iter().enumerate().take(HISTOGRAM_BINS - 1) {
        below += count;
        below_sum += cut as u64 * count;
        let var = between_class_variance(total, total_sum, below, below_sum);
        if var > best.map_or(0.0, |b| b.1) {
            best = Some((cut, var));
        }
    }
    best.map(|b| b.0)
}

/// Otsu threshold and the mask of values strictly above it.
///
/// A field without two populated bins yields threshold 1 and an empty mask.
pub fn otsu_threshold(field: &ScalarField) -> (f64, TissueMask) {
    let counts = histogram(field);
    let (threshold, bits) = match otsu_cut(&counts) {
        Some(cut) => (
            (cut + 1) as f64 / HISTOGRAM_BINS as f64,
            field.values.iter().map(|&v| histogram_bin(v) > cut).collect(),
        ),
        None => (1.0, vec![false; field.values.len()]),
    };
    (
        threshold,
        TissueMask {
            width: field.width,
            height: field.height,
            bits,
        },
    )
}

pub fn extract_patches(mask: &TissueMask, patch_size: usize, coverage_threshold: f64) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::InvalidConfig("patch size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&coverage_threshold) {
        return Err(Error::InvalidConfig(format!(
            "coverage threshold {coverage_threshold} outside [0, 1]"
        )));
    }
    let area = (patch_size * patch_size) as f64;
    let mut kept = Vec::new();
    for row in (0..mask.height).step_by(patch_size) {
        if row + patch_size > mask.height {
            break;
        }
        for col in (0..mask.width).step_by(patch_size) {
            if col + patch_size > mask.width {
                break;
            }
            let tissue: usize = (row..row + patch_size)
                .map(|y| {
                    let start = y * mask.width + col;
                    mask.bits[start..start + patch_size].iter().filter(|b| **b).count()
                })
                .sum();
            if tissue as f64 / area >= coverage_threshold {
                kept.push([row, col]);
            }
        }
    }
    Ok(PatchGrid {
        header: GridHeader {
            patch_size,
            coverage_threshold,
            width: mask.width,
            height: mask.height,
        },
        kept,
    })
}

pub fn preprocess_image(image: &RasterImage, patch_size: usize, coverage_threshold: f64) -> Result<PatchGrid> {
    let saturation = rgb_to_saturation(image);
    let (_, mask) = otsu_threshold(&saturation);
    extract_patches(&mask, patch_size, coverage_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(values: Vec<f64>) -> ScalarField {
        ScalarField {
            width: values.len(),
            height: 1,
            values,
        }
    }

    #[test]
    fn saturation_values() {
        let img = RasterImage::new(
            4,
            1,
            vec![[0.5, 0.5, 0.5], [1.0, 0.0, 0.0], [0.5, 0.25, 0.75], [0.0, 0.0, 0.0]],
        )
        .unwrap();
        let s = rgb_to_saturation(&img).values;
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 1.0);
        assert!((s[2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn bimodal_field_splits_between_modes() {
        let f = field(vec![0.2, 0.8, 0.2, 0.8, 0.8]);
        let (t, mask) = otsu_threshold(&f);
        assert!(t > 0.2 && t < 0.8, "threshold {t}");
        assert_eq!(mask.bits, vec![false, true, false, true, true]);
    }

    #[test]
    fn constant_field_gives_empty_mask() {
        let (_, mask) = otsu_threshold(&field(vec![0.4; 9]));
        assert_eq!(mask.tissue_pixels(), 0);
    }

    #[test]
    fn mask_is_value_above_threshold() {
        let f = field((0..300).map(|i| (i as f64 / 299.0).powi(2)).collect());
        let (t, mask) = otsu_threshold(&f);
        for (v, b) in f.values.iter().zip(&mask.bits) {
            assert_eq!(*v > t, *b);
        }
    }

    #[test]
    fn full_mask_yields_four_patches() {
        let mask = TissueMask::from_fn(1024, 1024, |_, _| true);
        let grid = extract_patches(&mask, 512, 0.5).unwrap();
        assert_eq!(grid.kept, vec![[0, 0], [0, 512], [512, 0], [512, 512]]);
    }

    #[test]
    fn coverage_boundary_is_inclusive() {
        // 10x10 patch: 49 tissue pixels is discarded, 50 is kept.
        for (tissue, kept) in [(49, false), (50, true)] {
            let mask = TissueMask::from_fn(10, 10, |x, y| y * 10 + x < tissue);
            let grid = extract_patches(&mask, 10, 0.5).unwrap();
            assert_eq!(!grid.kept.is_empty(), kept, "tissue={tissue}");
        }
    }

    #[test]
    fn oversized_patch_gives_empty_grid() {
        let mask = TissueMask::from_fn(30, 20, |_, _| true);
        assert!(extract_patches(&mask, 64, 0.5).unwrap().kept.is_empty());
    }

    #[test]
    fn partial_border_tiles_are_dropped() {
        let mask = TissueMask::from_fn(25, 12, |_, _| true);
        let grid = extract_patches(&mask, 10, 0.0).unwrap();
        assert_eq!(grid.kept, vec![[0, 0], [0, 10]]);
    }

    #[test]
    fn gray_image_has_no_patches() {
        let img = RasterImage::from_fn(64, 64, |_, _| [0.6, 0.6, 0.6]).unwrap();
        assert!(preprocess_image(&img, 16, 0.5).unwrap().kept.is_empty());
    }

    #[test]
    fn zero_threshold_keeps_every_full_patch() {
        let img = RasterImage::from_fn(64, 48, |_, _| [0.6, 0.6, 0.6]).unwrap();
        assert_eq!(preprocess_image(&img, 16, 0.0).unwrap().kept.len(), 12);
    }

    proptest! {
        #[test]
        fn threshold_ignores_pixel_order(mut values in proptest::collection::vec(0.0f64..=1.0, 2..200), rot in 0usize..200) {
            let (t1, _) = otsu_threshold(&field(values.clone()));
            let k = rot % values.len();
            values.rotate_left(k);
            values.reverse();
            let (t2, _) = otsu_threshold(&field(values));
            prop_assert_eq!(t1, t2);
        }

        #[test]
        fn lower_threshold_keeps_superset(bits in proptest::collection::vec(any::<bool>(), 400), lo in 0.0f64..=1.0, hi in 0.0f64..=1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let mask = TissueMask { width: 20, height: 20, bits };
            let strict = extract_patches(&mask, 5, hi).unwrap().kept;
            let loose = extract_patches(&mask, 5, lo).unwrap().kept;
            prop_assert!(strict.iter().all(|p| loose.contains(p)));
        }
    }
}
