//! Synthetic quadrant-blob dataset.
//!
//! Class `k` places one bright disk (every blob pixel >= 0.8, radius
//! 3-5 px) fully inside quadrant `k` of the image, over uniform noise in
//! `[0, 0.2]`. The class is therefore recoverable from pixel content
//! alone: the quadrant with the highest mean intensity wins.

use super::Image;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameters of the generated dataset. Quadrants are numbered row-major:
/// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Clone, Debug)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec { num_classes: 4, samples_per_class: 200, image_size: 32, seed: 0 }
    }
}

const BLOB_MIN_RADIUS: f64 = 3.0;
const BLOB_MAX_RADIUS: f64 = 5.0;
const NOISE_AMPLITUDE: f64 = 0.2;
const BLOB_FLOOR: f64 = 0.8;

/// Generates the dataset deterministically from its seed. Classes are
/// interleaved (`sample i` has label `i % num_classes`), so any prefix
/// stays balanced.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Vec<(Image, usize)>> {
    if spec.num_classes != 4 {
        return Err(Error::param(format!(
            "synthetic dataset defines 4 quadrant classes, got {}",
            spec.num_classes
        )));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::param("samples_per_class must be >= 1".to_string()));
    }
    let size = spec.image_size;
    let half = size / 2;
    if size < 16 || size % 2 != 0 {
        return Err(Error::param(format!(
            "image_size must be even and >= 16 to fit a blob per quadrant, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.num_classes * spec.samples_per_class;
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.num_classes;
        let mut pixels: Vec<f64> = (0..size * size * 3)
            .map(|_| rng.gen::<f64>() * NOISE_AMPLITUDE)
            .collect();

        let radius = BLOB_MIN_RADIUS + rng.gen::<f64>() * (BLOB_MAX_RADIUS - BLOB_MIN_RADIUS);
        // Keep the whole disk inside its quadrant so the brightest pixel
        // (and the quadrant mean) always identify the class.
        let margin = radius.ceil() + 1.0;
        let span = half as f64 - 2.0 * margin;
        let (qx, qy) = match class {
            0 => (0.0, 0.0),
            1 => (half as f64, 0.0),
            2 => (0.0, half as f64),
            _ => (half as f64, half as f64),
        };
        let cx = qx + margin + rng.gen::<f64>() * span;
        let cy = qy + margin + rng.gen::<f64>() * span;
        let peak = 0.85 + rng.gen::<f64>() * 0.15;

        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d <= radius {
                    // Radial falloff from `peak` at the center to the 0.8
                    // floor at the rim; all three channels equal.
                    let v = BLOB_FLOOR + (peak - BLOB_FLOOR) * (1.0 - d / radius);
                    for c in 0..3 {
                        pixels[(y * size + x) * 3 + c] = v;
                    }
                }
            }
        }
        out.push((Image::from_pixels_clamped(size, size, pixels), class));
    }
    Ok(out)
}

/// Mean intensity of each quadrant, row-major quadrant order.
pub fn quadrant_means(image: &Image) -> [f64; 4] {
    let size = image.width();
    let half = size / 2;
    let mut sums = [0.0; 4];
    for y in 0..size {
        for x in 0..size {
            let q = (y >= half) as usize * 2 + (x >= half) as usize;
            for c in 0..3 {
                sums[q] += image.get(x, y, c);
            }
        }
    }
    let count = (half * half * 3) as f64;
    sums.map(|s| s / count)
}
