//! Short-time Fourier transform magnitudes.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

/// STFT analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    /// FFT length; must be a power of two.
    pub window_len: usize,
    /// Frame advance in samples; `0 < hop <= window_len`.
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 128,
            hop: 64,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || !self.window_len.is_power_of_two() {
            return Err(Error::config(format!(
                "stft window_len must be a positive power of two, got {}",
                self.window_len
            )));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::config(format!(
                "stft hop must be in 1..={}, got {}",
                self.window_len, self.hop
            )));
        }
        Ok(())
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Number of one-sided frequency bins (0..=window_len/2).
    pub fn num_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn window_samples(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Rectangular => vec![1.0; self.window_len],
            WindowKind::Hann => {
                let n = self.window_len as f64;
                (0..self.window_len)
                    .map(|l| 0.5 - 0.5 * (std::f64::consts::TAU * l as f64 / n).cos())
                    .collect()
            }
        }
    }
}

/// Row-major magnitude grid: `rows` frequency bins by `cols` time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MagnitudeGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// One-sided STFT magnitude of a real signal.
///
/// Entry (k, m) is `|sum_l window[l] * signal[m*hop + l] * exp(-i 2 pi k l / window_len)|`.
pub fn stft_magnitude(signal: &[f64], cfg: &StftConfig) -> Result<MagnitudeGrid> {
    cfg.validate()?;
    if signal.len() < cfg.window_len {
        return Err(Error::input(format!(
            "signal length {} is shorter than stft window {}",
            signal.len(),
            cfg.window_len
        )));
    }
    let frames = cfg.num_frames(signal.len());
    let bins = cfg.num_bins();
    let window = cfg.window_samples();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.window_len);
    let mut buf = vec![Complex64::default(); cfg.window_len];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];

    let mut data = vec![0.0f64; bins * frames];
    for m in 0..frames {
        let start = m * cfg.hop;
        for l in 0..cfg.window_len {
            buf[l] = Complex64::new(signal[start + l] * window[l], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            data[k * frames + m] = buf[k].norm();
        }
    }
    Ok(MagnitudeGrid {
        rows: bins,
        cols: frames,
        data,
    })
}
