//! Image handling, dataset synthesis, weight files, and rendering.
//!
//! The mandatory interchange formats are binary PPM (P6, maxval 255) for
//! images and the `GMARW001` layout for model weights; both are bit-exact
//! and covered by round-trip tests. The toy pipeline feeds `[0,1]` pixel
//! values to the model directly, with no mean/std normalization, and the
//! saved weights assume the same convention.

mod ppm;
mod render;
mod synthetic;
mod weights;

pub use ppm::{decode_ppm, encode_ppm, load_image_ppm, save_image_ppm};
pub use render::{render_heatmap, RenderMode};
pub use synthetic::{generate_synthetic, SyntheticDatasetSpec};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHT_MAGIC};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with interleaved row-major channels, every value in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Image> {
        if pixels.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("image channel values must lie in [0,1]".to_string()));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn black(width: usize, height: usize) -> Image {
        Image { width, height, pixels: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Image {
        Image { width, height, pixels: vec![value.clamp(0.0, 1.0); width * height * 3] }
    }

    /// Builds an image from already-valid data, clamping to `[0,1]`.
    pub(crate) fn from_pixels_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Image {
        debug_assert_eq!(pixels.len(), width * height * 3);
        for v in pixels.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Image { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, channel: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + channel]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize, channel: usize, value: f64) {
        self.pixels[(y * self.width + x) * 3 + channel] = value;
    }
}

/// Bilinear resize with the half-pixel-center convention: destination
/// pixel `d` samples source coordinate `(d + 0.5) * src/dst - 0.5`, with
/// edge clamping. Resizing to the same size is the identity.
pub fn resize_bilinear(image: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::param("resize target must be at least 1x1".to_string()));
    }
    let pixels =
        bilinear_plane(image.pixels(), image.width, image.height, 3, width, height);
    Ok(Image::from_pixels_clamped(width, height, pixels))
}

/// Samples an interleaved multi-channel plane bilinearly. Shared by image
/// resizing and saliency-grid upsampling so the two agree exactly.
pub(crate) fn bilinear_plane(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_w * dst_h * channels];
    let x_ratio = src_w as f64 / dst_w as f64;
    let y_ratio = src_h as f64 / dst_h as f64;
    for dy in 0..dst_h {
        let sy = (dy as f64 + 0.5) * y_ratio - 0.5;
        let y0f = sy.floor();
        let fy = sy - y0f;
        let y0 = (y0f as isize).clamp(0, src_h as isize - 1) as usize;
        let y1 = (y0f as isize + 1).clamp(0, src_h as isize - 1) as usize;
        for dx in 0..dst_w {
            let sx = (dx as f64 + 0.5) * x_ratio - 0.5;
            let x0f = sx.floor();
            let fx = sx - x0f;
            let x0 = (x0f as isize).clamp(0, src_w as isize - 1) as usize;
            let x1 = (x0f as isize + 1).clamp(0, src_w as isize - 1) as usize;
            for c in 0..channels {
                let v00 = src[(y0 * src_w + x0) * channels + c];
                let v01 = src[(y0 * src_w + x1) * channels + c];
                let v10 = src[(y1 * src_w + x0) * channels + c];
                let v11 = src[(y1 * src_w + x1) * channels + c];
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out[(dy * dst_w + dx) * channels + c] = top + (bottom - top) * fy;
            }
        }
    }
    out
}

/// Upsamples a rank-2 grid to `width` x `height`, one value per pixel.
pub fn upsample_grid(grid: &Tensor, width: usize, height: usize) -> Result<Vec<f64>> {
    if grid.rank() != 2 {
        return Err(Error::dim(format!(
            "grid must be rank 2, got shape {:?}",
            grid.shape()
        )));
    }
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    Ok(bilinear_plane(grid.data(), gw, gh, 1, width, height))
}

/// Gaussian blur with a separable kernel of radius `ceil(3 sigma)` and
/// clamp-to-edge sampling.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    if sigma <= 0.0 {
        return Err(Error::param(format!("blur sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (w, h) = (image.width as isize, image.height as isize);
    let mut horizontal = vec![0.0; image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += kv * image.pixels[((y * w + sx) * 3) as usize + c];
                }
                horizontal[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; image.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, h - 1);
                    acc += kv * horizontal[((sy * w + x) * 3) as usize + c];
                }
                out[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    Ok(Image::from_pixels_clamped(image.width, image.height, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = Image::new(
            2,
            2,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.0, 0.5],
        )
        .unwrap();
        let out = resize_bilinear(&img, 2, 2).unwrap();
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = Image::filled(3, 3, 0.4);
        for (w, h) in [(1, 1), (2, 5), (7, 7), (16, 4)] {
            let out = resize_bilinear(&img, w, h).unwrap();
            assert!(out.pixels().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        }
    }

    #[test]
    fn checkerboard_upsample_matches_hand_table() {
        // 2x2 checkerboard [1 0; 0 1] to 4x4 under the half-pixel-center
        // convention; the expected grid is evaluated by hand.
        let grid = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = upsample_grid(&grid, 4, 4).unwrap();
        let expected = [
            1.0, 0.75, 0.25, 0.0, //
            0.75, 0.625, 0.375, 0.25, //
            0.25, 0.375, 0.625, 0.75, //
            0.0, 0.25, 0.75, 1.0,
        ];
        for (got, want) in up.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(8, 8, 0.6);
        let out = gaussian_blur(&img, 2.0).unwrap();
        for &v in out.pixels() {
            assert!((v - 0.6).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_spreads_mass() {
        let mut img = Image::black(9, 9);
        img.set(4, 4, 0, 1.0);
        img.set(4, 4, 1, 1.0);
        img.set(4, 4, 2, 1.0);
        let out = gaussian_blur(&img, 1.5).unwrap();
        assert!(out.get(4, 4, 0) < 1.0);
        assert!(out.get(3, 4, 0) > 0.0);
    }

    #[test]
    fn image_validates_range_and_size() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
        assert!(Image::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
    }
}
