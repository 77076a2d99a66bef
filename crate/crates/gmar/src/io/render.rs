//! Heatmap rendering: overlays, raw maps, and diverging difference maps.

use super::{bilinear_plane, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a grid is turned into pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// `0.5 * base + 0.5 * colormap(value)` with a blue-to-red colormap;
    /// expects values in `[0,1]`.
    Overlay,
    /// Grayscale of the map alone; the base image only sets the output size.
    Raw,
    /// Signed values in `[-1,1]`: blue for negative, white at zero, red
    /// for positive. Ignores the base content.
    Diverging,
}

fn blue_red(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [t, 0.0, 1.0 - t]
}

fn diverging(t: f64) -> [f64; 3] {
    let t = t.clamp(-1.0, 1.0);
    if t < 0.0 {
        [1.0 + t, 1.0 + t, 1.0]
    } else {
        [1.0, 1.0 - t, 1.0 - t]
    }
}

/// Upsamples `grid` to the base image's size and renders it in `mode`.
pub fn render_heatmap(grid: &Tensor, base: &Image, mode: RenderMode) -> Result<Image> {
    if grid.rank() != 2 {
        return Err(Error::dim(format!(
            "render_heatmap expects a rank-2 grid, got {:?}",
            grid.shape()
        )));
    }
    let (w, h) = (base.width(), base.height());
    let up = bilinear_plane(grid.data(), grid.shape()[1], grid.shape()[0], 1, w, h);
    let mut pixels = vec![0.0; w * h * 3];
    for (i, &v) in up.iter().enumerate() {
        let rgb = match mode {
            RenderMode::Overlay => {
                let c = blue_red(v);
                [
                    0.5 * base.pixels()[i * 3] + 0.5 * c[0],
                    0.5 * base.pixels()[i * 3 + 1] + 0.5 * c[1],
                    0.5 * base.pixels()[i * 3 + 2] + 0.5 * c[2],
                ]
            }
            RenderMode::Raw => {
                let g = v.clamp(0.0, 1.0);
                [g, g, g]
            }
            RenderMode::Diverging => diverging(v),
        };
        pixels[i * 3..i * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(Image::from_pixels_clamped(w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_overlay_is_half_base_half_blue() {
        let base = Image::filled(4, 4, 0.8);
        let grid = Tensor::zeros(vec![2, 2]);
        let out = render_heatmap(&grid, &base, RenderMode::Overlay).unwrap();
        for i in 0..16 {
            assert!((out.pixels()[i * 3] - 0.4).abs() < 1e-12); // 0.5*0.8 + 0.5*0
            assert!((out.pixels()[i * 3 + 1] - 0.4).abs() < 1e-12);
            assert!((out.pixels()[i * 3 + 2] - 0.9).abs() < 1e-12); // 0.5*0.8 + 0.5*1
        }
    }

    #[test]
    fn diverging_zero_grid_renders_white() {
        let base = Image::black(4, 4);
        let grid = Tensor::zeros(vec![2, 2]);
        let out = render_heatmap(&grid, &base, RenderMode::Diverging).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn raw_mode_ignores_base() {
        let grid = Tensor::new(vec![1, 1], vec![0.25]).unwrap();
        let dark = render_heatmap(&grid, &Image::black(2, 2), RenderMode::Raw).unwrap();
        let bright = render_heatmap(&grid, &Image::filled(2, 2, 1.0), RenderMode::Raw).unwrap();
        assert_eq!(dark.pixels(), bright.pixels());
        assert!((dark.get(0, 0, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn diverging_endpoints() {
        let base = Image::black(1, 1);
        let neg = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let pos = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let b = render_heatmap(&neg, &base, RenderMode::Diverging).unwrap();
        let r = render_heatmap(&pos, &base, RenderMode::Diverging).unwrap();
        assert_eq!(b.pixels(), &[0.0, 0.0, 1.0]);
        assert_eq!(r.pixels(), &[1.0, 0.0, 0.0]);
    }
}
