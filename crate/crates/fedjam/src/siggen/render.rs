//! Rendering of magnitude grids into quantized spectrogram images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::siggen::stft::MagnitudeGrid;

/// Floor added before log compression so silent bins stay finite.
const LOG_EPS: f64 = 1e-12;

/// Rendering options for [`render_spectrogram`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub out_h: usize,
    pub out_w: usize,
    /// Apply `20*log10(x + eps)` before resizing.
    pub log_scale: bool,
    /// Threshold the quantized image to {0, 255} at 128.
    pub binarize: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            out_h: 64,
            out_w: 64,
            log_scale: true,
            binarize: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_h < 2 || self.out_w < 2 {
            return Err(Error::config(format!(
                "render output dims must be at least 2x2, got {}x{}",
                self.out_h, self.out_w
            )));
        }
        Ok(())
    }
}

/// Bilinear resample of a row-major grid, corner-aligned: output corners map
/// exactly onto input corners. Requires `out_h, out_w >= 2`.
fn bilinear_resize(src: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; out_h * out_w];
    let sy = if out_h > 1 {
        (in_h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let sx = if out_w > 1 {
        (in_w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for i in 0..out_h {
        let y = i as f64 * sy;
        let y0 = (y.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = y - y0 as f64;
        for j in 0..out_w {
            let x = j as f64 * sx;
            let x0 = (x.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = x - x0 as f64;
            let v00 = src[y0 * in_w + x0];
            let v01 = src[y0 * in_w + x1];
            let v10 = src[y1 * in_w + x0];
            let v11 = src[y1 * in_w + x1];
            out[i * out_w + j] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// Render a magnitude grid to `out_h * out_w` 8-bit pixels.
///
/// Pipeline: optional log compression, corner-aligned bilinear resize, then
/// per-image min-max scaling to [0, 255] quantized with round-half-to-even.
/// A constant grid maps to all-zero pixels.
pub fn render_spectrogram(grid: &MagnitudeGrid, cfg: &RenderConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    if grid.rows == 0 || grid.cols == 0 || grid.data.is_empty() {
        return Err(Error::input("empty magnitude grid".to_string()));
    }
    let values: Vec<f64> = if cfg.log_scale {
        grid.data.iter().map(|&v| 20.0 * (v + LOG_EPS).log10()).collect()
    } else {
        grid.data.clone()
    };
    let resized = bilinear_resize(&values, grid.rows, grid.cols, cfg.out_h, cfg.out_w);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &resized {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mut pixels = vec![0u8; resized.len()];
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        for (p, &v) in pixels.iter_mut().zip(&resized) {
            *p = ((v - lo) * scale).round_ties_even() as u8;
        }
    }
    if cfg.binarize {
        for p in &mut pixels {
            *p = if *p >= 128 { 255 } else { 0 };
        }
    }
    Ok(pixels)
}

/// Debug export as binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), height * width);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
