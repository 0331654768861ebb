//! Fixed-architecture CNN: conv -> ReLU -> max-pool -> FC -> softmax, with
//! exact backpropagation, cross-entropy loss, and mini-batch SGD.
//!
//! The arithmetic core is generic over the storage scalar: `f32` for
//! training artifacts and `f64` for gradient verification. All reductions
//! accumulate in 64-bit regardless of the storage type; updates and stores
//! round once to the storage type.

mod ops;

pub mod io;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub use ops::{
    batch_loss, evaluate_samples, forward, loss_and_grad, sgd_epochs, Examples, SampleEval,
};

/// Storage scalar for network parameters and activations.
pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {expect} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Architecture hyperparameters. Convolution is single-input-channel,
/// "valid" padding; pooling is max with stride equal to its size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub pool_size: usize,
    pub num_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            input_h: 64,
            input_w: 64,
            conv_filters: 16,
            conv_kernel: 12,
            conv_stride: 1,
            pool_size: 2,
            num_classes: 6,
        }
    }
}

/// Layer sizes derived from a [`CnnConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub conv_h: usize,
    pub conv_w: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    /// Flattened pooled feature count: filters * pool_h * pool_w.
    pub feat: usize,
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_filters == 0
            || self.conv_kernel == 0
            || self.conv_stride == 0
            || self.pool_size == 0
        {
            return Err(Error::config("cnn dims must all be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.input_h < self.conv_kernel || self.input_w < self.conv_kernel {
            return Err(Error::config(format!(
                "input {}x{} smaller than kernel {}",
                self.input_h, self.input_w, self.conv_kernel
            )));
        }
        if (self.input_h - self.conv_kernel) % self.conv_stride != 0
            || (self.input_w - self.conv_kernel) % self.conv_stride != 0
        {
            return Err(Error::config(format!(
                "input {}x{} minus kernel {} must be divisible by stride {}",
                self.input_h, self.input_w, self.conv_kernel, self.conv_stride
            )));
        }
        let d = self.dims();
        if d.pool_h == 0 || d.pool_w == 0 {
            return Err(Error::config(format!(
                "conv output {}x{} collapses under pool size {}",
                d.conv_h, d.conv_w, self.pool_size
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> LayerDims {
        let conv_h = (self.input_h - self.conv_kernel) / self.conv_stride + 1;
        let conv_w = (self.input_w - self.conv_kernel) / self.conv_stride + 1;
        let pool_h = conv_h / self.pool_size;
        let pool_w = conv_w / self.pool_size;
        LayerDims {
            conv_h,
            conv_w,
            pool_h,
            pool_w,
            feat: self.conv_filters * pool_h * pool_w,
        }
    }
}

/// The learnable parameters: conv weights/bias and FC weights/bias, in the
/// fixed order used by flattening, averaging, and the FJWT format.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F = f32> {
    /// `[filters, 1, k, k]`
    pub conv_w: Tensor<F>,
    /// `[filters]`
    pub conv_b: Tensor<F>,
    /// `[num_classes, feat]`
    pub fc_w: Tensor<F>,
    /// `[num_classes]`
    pub fc_b: Tensor<F>,
}

/// The f32 parameter vector exchanged between clients and server.
pub type ModelParams = Params<f32>;

pub const PARAM_NAMES: [&str; 4] = ["conv_w", "conv_b", "fc_w", "fc_b"];

impl<F: Real> Params<F> {
    pub fn zeros(cfg: &CnnConfig) -> Self {
        let d = cfg.dims();
        Params {
            conv_w: Tensor::zeros(&[cfg.conv_filters, 1, cfg.conv_kernel, cfg.conv_kernel]),
            conv_b: Tensor::zeros(&[cfg.conv_filters]),
            fc_w: Tensor::zeros(&[cfg.num_classes, d.feat]),
            fc_b: Tensor::zeros(&[cfg.num_classes]),
        }
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases. Draws are
    /// made in f64 in a fixed order, so every storage type sees the same
    /// underlying sequence.
    pub fn init(cfg: &CnnConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = rng_from_seed(seed);
        let k2 = (cfg.conv_kernel * cfg.conv_kernel) as f64;
        let conv_bound = (6.0 / k2).sqrt();
        for w in &mut p.conv_w.data {
            *w = F::from_f64(rng.gen_range(-conv_bound..conv_bound));
        }
        let fc_bound = (6.0 / cfg.dims().feat as f64).sqrt();
        for w in &mut p.fc_w.data {
            *w = F::from_f64(rng.gen_range(-fc_bound..fc_bound));
        }
        p
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<F>); 4] {
        [
            (PARAM_NAMES[0], &self.conv_w),
            (PARAM_NAMES[1], &self.conv_b),
            (PARAM_NAMES[2], &self.fc_w),
            (PARAM_NAMES[3], &self.fc_b),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.conv_w.len() + self.conv_b.len() + self.fc_w.len() + self.fc_b.len()
    }

    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.conv_w.data);
        out.extend_from_slice(&self.conv_b.data);
        out.extend_from_slice(&self.fc_w.data);
        out.extend_from_slice(&self.fc_b.data);
        out
    }

    pub fn unflatten(cfg: &CnnConfig, flat: &[F]) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        if flat.len() != p.num_params() {
            return Err(Error::shape(
                "params",
                format!("flat vector has {} values, expected {}", flat.len(), p.num_params()),
            ));
        }
        let mut at = 0usize;
        for t in [&mut p.conv_w, &mut p.conv_b, &mut p.fc_w, &mut p.fc_b] {
            let n = t.len();
            t.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(p)
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        self.conv_w.shape == other.conv_w.shape
            && self.conv_b.shape == other.conv_b.shape
            && self.fc_w.shape == other.fc_w.shape
            && self.fc_b.shape == other.fc_b.shape
    }

    pub fn matches_config(&self, cfg: &CnnConfig) -> Result<()> {
        let expect = Self::zeros(cfg);
        for ((name, have), (_, want)) in self.tensors().iter().zip(expect.tensors().iter()) {
            if have.shape != want.shape {
                return Err(Error::shape(
                    *name,
                    format!("tensor has shape {:?}, config wants {:?}", have.shape, want.shape),
                ));
            }
        }
        Ok(())
    }

    /// Convert storage scalar (via f64, exact for widening).
    pub fn convert<G: Real>(&self) -> Params<G> {
        let map = |t: &Tensor<F>| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        };
        Params {
            conv_w: map(&self.conv_w),
            conv_b: map(&self.conv_b),
            fc_w: map(&self.fc_w),
            fc_b: map(&self.fc_b),
        }
    }

    /// Rebuild parameters from a flat f64 vector in flatten order, rounding
    /// once to the storage type.
    pub fn from_f64_flat(cfg: &CnnConfig, flat: &[f64]) -> Result<Self> {
        let as_f: Vec<F> = flat.iter().map(|&v| F::from_f64(v)).collect();
        Self::unflatten(cfg, &as_f)
    }
}

/// Local-solver hyperparameters for one client (or the centralized trainer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 1,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
