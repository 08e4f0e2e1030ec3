//! Otsu tissue mask and patch grid on a synthetic slide: a stained disk on a
//! pale background.
//!
//! ```bash
//! cargo run --example tissue_tiling
//! ```

use belmil::preprocess::{
    extract_patches, otsu_threshold, preprocess_image, rgb_to_saturation, RasterImage, DEFAULT_COVERAGE,
};

fn main() -> belmil::Result<()> {
    let (size, patch) = (1024, 128);
    let (cx, cy, radius) = (540.0, 480.0, 350.0);
    let slide = RasterImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        if dx * dx + dy * dy <= radius * radius {
            [0.75, 0.35, 0.60]
        } else {
            [0.94, 0.93, 0.95]
        }
    })?;

    let saturation = rgb_to_saturation(&slide);
    let (threshold, mask) = otsu_threshold(&saturation);
    println!(
        "Otsu threshold {threshold:.4}; tissue {:.1}% of the slide",
        100.0 * mask.tissue_pixels() as f64 / (size * size) as f64
    );

    for coverage in [0.25, DEFAULT_COVERAGE, 0.9] {
        let grid = extract_patches(&mask, patch, coverage)?;
        println!("coverage ≥ {coverage:.2}: {} of {} patches kept", grid.kept.len(), (size / patch).pow(2));
    }

    let grid = preprocess_image(&slide, patch, DEFAULT_COVERAGE)?;
    for row in (0..size).step_by(patch) {
        let line: String = (0..size)
            .step_by(patch)
            .map(|col| if grid.kept.contains(&[row, col]) { '#' } else { '.' })
            .collect();
        println!("  {line}");
    }
    Ok(())
}
