//! Forward/backward kernels, loss, and the SGD loop.
//!
//! Per-sample work is independent, so batches are processed in parallel over
//! fixed-size index chunks and partial results are combined in index order;
//! results are bitwise independent of the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

use super::{CnnConfig, LayerDims, Params, Real, Tensor, TrainConfig};

/// Pixel value scaling to [0, 1].
const PIXEL_LUT: [f64; 256] = {
    let mut a = [0.0f64; 256];
    let mut i = 0;
    while i < 256 {
        a[i] = i as f64 / 255.0;
        i += 1;
    }
    a
};

/// Fixed chunk sizes keep parallel reductions order-stable.
const GRAD_CHUNK: usize = 8;
const EVAL_CHUNK: usize = 32;

/// Read access to labeled 8-bit images for training and evaluation.
pub trait Examples: Sync {
    fn len(&self) -> usize;
    /// (height, width) of every image.
    fn dims(&self) -> (usize, usize);
    fn pixels(&self, i: usize) -> &[u8];
    fn label(&self, i: usize) -> u8;
}

/// Batch abstraction shared by the tensor-based and dataset-based paths.
trait BatchSource<F: Real>: Sync {
    fn count(&self) -> usize;
    /// Write sample `i` as pixels in [0, 1], quantized to the storage scalar.
    fn fill(&self, i: usize, out: &mut [F]);
    fn label(&self, i: usize) -> u8;
}

struct TensorBatch<'a, F: Real> {
    batch: &'a Tensor<F>,
    labels: &'a [u8],
    dim: usize,
}

impl<F: Real> BatchSource<F> for TensorBatch<'_, F> {
    fn count(&self) -> usize {
        self.batch.shape[0]
    }
    fn fill(&self, i: usize, out: &mut [F]) {
        out.copy_from_slice(&self.batch.data[i * self.dim..(i + 1) * self.dim]);
    }
    fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }
}

struct ExampleBatch<'a, E: Examples> {
    data: &'a E,
    idx: &'a [usize],
}

impl<E: Examples, F: Real> BatchSource<F> for ExampleBatch<'_, E> {
    fn count(&self) -> usize {
        self.idx.len()
    }
    fn fill(&self, i: usize, out: &mut [F]) {
        // Quantizing to the storage scalar matches a caller-built Tensor<F>
        // batch bit for bit.
        for (o, &p) in out.iter_mut().zip(self.data.pixels(self.idx[i])) {
            *o = F::from_f64(PIXEL_LUT[p as usize]);
        }
    }
    fn label(&self, i: usize) -> u8 {
        self.data.label(self.idx[i])
    }
}

/// Per-worker buffers for one sample's forward/backward pass.
struct Scratch<F: Real> {
    x: Vec<F>,
    relu: Vec<F>,
    pool: Vec<F>,
    pool_arg: Vec<u32>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    row_acc: Vec<f64>,
    row_part: Vec<F>,
    dpool: Vec<f64>,
}

impl<F: Real> Scratch<F> {
    fn new(cfg: &CnnConfig, d: &LayerDims) -> Self {
        Scratch {
            x: vec![F::ZERO; cfg.input_h * cfg.input_w],
            relu: vec![F::ZERO; cfg.conv_filters * d.conv_h * d.conv_w],
            pool: vec![F::ZERO; d.feat],
            pool_arg: vec![0; d.feat],
            logits: vec![0.0; cfg.num_classes],
            probs: vec![0.0; cfg.num_classes],
            row_acc: vec![0.0; d.conv_w],
            row_part: vec![F::ZERO; d.conv_w],
            dpool: vec![0.0; d.feat],
        }
    }
}

/// `dst[j] += c * src[j]` with eight-lane blocking so the f32-to-f64 widening
/// path vectorizes regardless of slice length.
#[inline]
fn axpy_widen<F: Real>(dst: &mut [f64], c: f64, src: &[F]) {
    let n = dst.len().min(src.len());
    let split = n - n % 8;
    let (dst8, dst_rem) = dst[..n].split_at_mut(split);
    let (src8, src_rem) = src[..n].split_at(split);
    for (d, s) in dst8.chunks_exact_mut(8).zip(src8.chunks_exact(8)) {
        for j in 0..8 {
            d[j] += c * s[j].to_f64();
        }
    }
    for (d, s) in dst_rem.iter_mut().zip(src_rem) {
        *d += c * s.to_f64();
    }
}

/// Gradient accumulator in flatten order, always 64-bit.
struct GradBuf {
    conv_w: Vec<f64>,
    conv_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

impl GradBuf {
    fn zeros(cfg: &CnnConfig) -> Self {
        let d = cfg.dims();
        GradBuf {
            conv_w: vec![0.0; cfg.conv_filters * cfg.conv_kernel * cfg.conv_kernel],
            conv_b: vec![0.0; cfg.conv_filters],
            fc_w: vec![0.0; cfg.num_classes * d.feat],
            fc_b: vec![0.0; cfg.num_classes],
        }
    }

    fn add(&mut self, other: &GradBuf) {
        for (a, b) in [
            (&mut self.conv_w, &other.conv_w),
            (&mut self.conv_b, &other.conv_b),
            (&mut self.fc_w, &other.fc_w),
            (&mut self.fc_b, &other.fc_b),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn into_params<F: Real>(self, cfg: &CnnConfig, scale: f64) -> Params<F> {
        let mut flat =
            Vec::with_capacity(self.conv_w.len() + self.conv_b.len() + self.fc_w.len() + self.fc_b.len());
        for part in [self.conv_w, self.conv_b, self.fc_w, self.fc_b] {
            flat.extend(part.into_iter().map(|v| v * scale));
        }
        Params::from_f64_flat(cfg, &flat).expect("gradient buffer matches config")
    }
}

/// conv -> ReLU -> max-pool -> FC -> softmax for one sample.
///
/// Within one kernel row, products accumulate in the storage scalar; row
/// partials and everything wider accumulate in f64 and round once to the
/// storage type. Pooling takes the first occurrence of the window maximum in
/// row-major order. Softmax subtracts the row max before exponentiation.
fn forward_sample<F: Real>(cfg: &CnnConfig, d: &LayerDims, p: &Params<F>, s: &mut Scratch<F>) {
    // Split the scratch struct into independent borrows so the optimizer can
    // keep slice pointers in registers through the hot loops.
    let Scratch {
        x,
        relu,
        pool: pooled,
        pool_arg,
        logits,
        probs,
        row_acc,
        row_part,
        dpool: _,
    } = s;
    let x: &[F] = x;
    let k = cfg.conv_kernel;
    let stride = cfg.conv_stride;
    let in_w = cfg.input_w;
    for f in 0..cfg.conv_filters {
        let bias = p.conv_b.data[f].to_f64();
        let w_plane = &p.conv_w.data[f * k * k..(f + 1) * k * k];
        for oi in 0..d.conv_h {
            if stride == 1 {
                // Register-blocked path: BLK outputs at a time, partials for
                // one kernel row held in a fixed-size array the optimizer can
                // keep in vector registers across all taps.
                const BLK: usize = 16;
                let mut oj = 0usize;
                while oj + BLK <= d.conv_w {
                    let mut acc = [0.0f64; BLK];
                    for ki in 0..k {
                        let xrow = &x[(oi + ki) * in_w + oj..];
                        let wrow = &w_plane[ki * k..(ki + 1) * k];
                        let mut part = [F::ZERO; BLK];
                        for (kj, &wv) in wrow.iter().enumerate() {
                            let xs = &xrow[kj..kj + BLK];
                            for j in 0..BLK {
                                part[j] += wv * xs[j];
                            }
                        }
                        for j in 0..BLK {
                            acc[j] += part[j].to_f64();
                        }
                    }
                    let out_row = &mut relu[(f * d.conv_h + oi) * d.conv_w + oj..];
                    for j in 0..BLK {
                        let v = acc[j] + bias;
                        out_row[j] = if v > 0.0 { F::from_f64(v) } else { F::ZERO };
                    }
                    oj += BLK;
                }
                if oj < d.conv_w {
                    let rest = d.conv_w - oj;
                    let row_acc = &mut row_acc[..rest];
                    let row_part = &mut row_part[..rest];
                    row_acc.fill(0.0);
                    for ki in 0..k {
                        let xrow = &x[(oi + ki) * in_w + oj..];
                        let wrow = &w_plane[ki * k..(ki + 1) * k];
                        row_part.fill(F::ZERO);
                        for (kj, &wv) in wrow.iter().enumerate() {
                            let xs = &xrow[kj..kj + rest];
                            for (a, &xv) in row_part.iter_mut().zip(xs) {
                                *a += wv * xv;
                            }
                        }
                        for (acc, &pv) in row_acc.iter_mut().zip(row_part.iter()) {
                            *acc += pv.to_f64();
                        }
                    }
                    let out_row = &mut relu[(f * d.conv_h + oi) * d.conv_w + oj..];
                    for (o, &a) in out_row[..rest].iter_mut().zip(row_acc.iter()) {
                        let v = a + bias;
                        *o = if v > 0.0 { F::from_f64(v) } else { F::ZERO };
                    }
                }
            } else {
                row_acc.fill(0.0);
                for ki in 0..k {
                    let xrow = &x[(oi * stride + ki) * in_w..(oi * stride + ki + 1) * in_w];
                    let wrow = &w_plane[ki * k..(ki + 1) * k];
                    row_part.fill(F::ZERO);
                    for (kj, &wv) in wrow.iter().enumerate() {
                        for (oj, a) in row_part.iter_mut().enumerate() {
                            *a += wv * xrow[oj * stride + kj];
                        }
                    }
                    for (acc, &pv) in row_acc.iter_mut().zip(row_part.iter()) {
                        *acc += pv.to_f64();
                    }
                }
                let out_row =
                    &mut relu[(f * d.conv_h + oi) * d.conv_w..(f * d.conv_h + oi + 1) * d.conv_w];
                for (o, &a) in out_row.iter_mut().zip(row_acc.iter()) {
                    let v = a + bias;
                    *o = if v > 0.0 { F::from_f64(v) } else { F::ZERO };
                }
            }
        }
    }

    let pool = cfg.pool_size;
    for f in 0..cfg.conv_filters {
        let plane = &relu[f * d.conv_h * d.conv_w..(f + 1) * d.conv_h * d.conv_w];
        for pi in 0..d.pool_h {
            for pj in 0..d.pool_w {
                let mut arg = (pi * pool) * d.conv_w + pj * pool;
                let mut best = plane[arg];
                for di in 0..pool {
                    let base = (pi * pool + di) * d.conv_w + pj * pool;
                    for dj in 0..pool {
                        let v = plane[base + dj];
                        if v > best {
                            best = v;
                            arg = base + dj;
                        }
                    }
                }
                let out = (f * d.pool_h + pi) * d.pool_w + pj;
                pooled[out] = best;
                pool_arg[out] = arg as u32;
            }
        }
    }

    for c in 0..cfg.num_classes {
        let wrow = &p.fc_w.data[c * d.feat..(c + 1) * d.feat];
        let mut acc = 0.0f64;
        for (w, a) in wrow.iter().zip(pooled.iter()) {
            acc += w.to_f64() * a.to_f64();
        }
        logits[c] = acc + p.fc_b.data[c].to_f64();
    }

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for (pr, &l) in probs.iter_mut().zip(logits.iter()) {
        let e = (l - max).exp();
        *pr = e;
        sum += e;
    }
    for pr in probs.iter_mut() {
        *pr /= sum;
    }
}

/// Cross-entropy of the already-computed softmax for the given label.
fn sample_loss<F: Real>(s: &Scratch<F>, label: usize) -> f64 {
    let max = s.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = s.logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln() - s.logits[label]
}

/// Accumulate this sample's parameter gradient (unscaled) into `g`.
fn backward_sample<F: Real>(
    cfg: &CnnConfig,
    d: &LayerDims,
    p: &Params<F>,
    s: &mut Scratch<F>,
    label: usize,
    g: &mut GradBuf,
) {
    let Scratch {
        x,
        relu,
        pool: pooled,
        pool_arg,
        probs,
        dpool,
        ..
    } = s;
    let x: &[F] = x;
    let classes = cfg.num_classes;
    // d loss / d logits = softmax - one_hot(label)
    for c in 0..classes {
        let dl = probs[c] - if c == label { 1.0 } else { 0.0 };
        g.fc_b[c] += dl;
        axpy_widen(&mut g.fc_w[c * d.feat..(c + 1) * d.feat], dl, pooled);
    }
    dpool.fill(0.0);
    for c in 0..classes {
        let dl = probs[c] - if c == label { 1.0 } else { 0.0 };
        axpy_widen(dpool, dl, &p.fc_w.data[c * d.feat..(c + 1) * d.feat]);
    }

    // Route pooled gradients to their argmax positions, gated by the ReLU
    // mask, and accumulate the convolution weight/bias gradients there. Only
    // selected positions carry gradient, so this stays sparse.
    let k = cfg.conv_kernel;
    let stride = cfg.conv_stride;
    let in_w = cfg.input_w;
    for f in 0..cfg.conv_filters {
        let plane = &relu[f * d.conv_h * d.conv_w..(f + 1) * d.conv_h * d.conv_w];
        let gw_plane = &mut g.conv_w[f * k * k..(f + 1) * k * k];
        for cell in f * d.pool_h * d.pool_w..(f + 1) * d.pool_h * d.pool_w {
            let dv = dpool[cell];
            let arg = pool_arg[cell] as usize;
            if dv == 0.0 || !(plane[arg] > F::ZERO) {
                continue;
            }
            let oi = arg / d.conv_w;
            let oj = arg % d.conv_w;
            g.conv_b[f] += dv;
            for ki in 0..k {
                let xrow = &x[(oi * stride + ki) * in_w + oj * stride..][..k];
                axpy_widen(&mut gw_plane[ki * k..(ki + 1) * k], dv, xrow);
            }
        }
    }
}

fn check_params_finite_batch<F: Real>(batch: &Tensor<F>, cfg: &CnnConfig) -> Result<usize> {
    if batch.shape.len() != 4 || batch.shape[1] != 1 {
        return Err(Error::shape(
            "input",
            format!("expected batch shape [B, 1, H, W], got {:?}", batch.shape),
        ));
    }
    if batch.shape[2] != cfg.input_h || batch.shape[3] != cfg.input_w {
        return Err(Error::shape(
            "input",
            format!(
                "batch images are {}x{}, config wants {}x{}",
                batch.shape[2], batch.shape[3], cfg.input_h, cfg.input_w
            ),
        ));
    }
    if batch.shape[0] == 0 {
        return Err(Error::shape("input", "empty batch"));
    }
    Ok(batch.shape[0])
}

fn check_labels(labels: &[u8], count: usize, classes: usize) -> Result<()> {
    if labels.len() != count {
        return Err(Error::input(format!(
            "{} labels for {count} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Class posteriors for a batch: input `[B, 1, H, W]`, output `[B, C]`.
pub fn forward<F: Real>(p: &Params<F>, cfg: &CnnConfig, batch: &Tensor<F>) -> Result<Tensor<F>> {
    cfg.validate()?;
    p.matches_config(cfg)?;
    let b = check_params_finite_batch(batch, cfg)?;
    let d = cfg.dims();
    let dim = cfg.input_h * cfg.input_w;
    let src = TensorBatch {
        batch,
        labels: &[],
        dim,
    };
    let rows: Vec<Vec<f64>> = (0..b.div_ceil(EVAL_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * EVAL_CHUNK;
            let hi = (lo + EVAL_CHUNK).min(b);
            let mut s = Scratch::<F>::new(cfg, &d);
            let mut out = Vec::with_capacity((hi - lo) * cfg.num_classes);
            for i in lo..hi {
                src.fill(i, &mut s.x);
                forward_sample(cfg, &d, p, &mut s);
                out.extend_from_slice(&s.probs);
            }
            out
        })
        .collect();
    let mut data = Vec::with_capacity(b * cfg.num_classes);
    for row in rows {
        data.extend(row.into_iter().map(F::from_f64));
    }
    Tensor::from_vec(&[b, cfg.num_classes], data)
}

fn batch_loss_grad_impl<F: Real, S: BatchSource<F>>(
    p: &Params<F>,
    cfg: &CnnConfig,
    src: &S,
) -> (f64, Params<F>) {
    let n = src.count();
    let d = cfg.dims();
    let chunks: Vec<(f64, GradBuf)> = (0..n.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(n);
            let mut s = Scratch::<F>::new(cfg, &d);
            let mut g = GradBuf::zeros(cfg);
            let mut loss = 0.0f64;
            for i in lo..hi {
                src.fill(i, &mut s.x);
                forward_sample(cfg, &d, p, &mut s);
                let y = src.label(i) as usize;
                loss += sample_loss(&s, y);
                backward_sample(cfg, &d, p, &mut s, y, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total_loss = 0.0f64;
    let mut total = GradBuf::zeros(cfg);
    for (l, g) in &chunks {
        total_loss += l;
        total.add(g);
    }
    let scale = 1.0 / n as f64;
    (total_loss * scale, total.into_params(cfg, scale))
}

/// Mean cross-entropy and its gradient over a batch.
pub fn loss_and_grad<F: Real>(
    p: &Params<F>,
    cfg: &CnnConfig,
    batch: &Tensor<F>,
    labels: &[u8],
) -> Result<(f64, Params<F>)> {
    cfg.validate()?;
    p.matches_config(cfg)?;
    let b = check_params_finite_batch(batch, cfg)?;
    check_labels(labels, b, cfg.num_classes)?;
    let src = TensorBatch {
        batch,
        labels,
        dim: cfg.input_h * cfg.input_w,
    };
    Ok(batch_loss_grad_impl(p, cfg, &src))
}

/// Mean cross-entropy only; the loss path used by finite-difference checks.
pub fn batch_loss<F: Real>(
    p: &Params<F>,
    cfg: &CnnConfig,
    batch: &Tensor<F>,
    labels: &[u8],
) -> Result<f64> {
    cfg.validate()?;
    p.matches_config(cfg)?;
    let b = check_params_finite_batch(batch, cfg)?;
    check_labels(labels, b, cfg.num_classes)?;
    let src = TensorBatch {
        batch,
        labels,
        dim: cfg.input_h * cfg.input_w,
    };
    let d = cfg.dims();
    let mut s = Scratch::<F>::new(cfg, &d);
    let mut loss = 0.0f64;
    for i in 0..b {
        src.fill(i, &mut s.x);
        forward_sample(cfg, &d, p, &mut s);
        loss += sample_loss(&s, labels[i] as usize);
    }
    Ok(loss / b as f64)
}

fn check_examples<E: Examples>(cfg: &CnnConfig, data: &E) -> Result<()> {
    let (h, w) = data.dims();
    if h != cfg.input_h || w != cfg.input_w {
        return Err(Error::shape(
            "input",
            format!("examples are {h}x{w}, config wants {}x{}", cfg.input_h, cfg.input_w),
        ));
    }
    for i in 0..data.len() {
        if data.label(i) as usize >= cfg.num_classes {
            return Err(Error::input(format!(
                "example {i} has label {} out of range for {} classes",
                data.label(i),
                cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// Mini-batch SGD over `data` for `t.epochs` passes.
///
/// Batch order is reshuffled every epoch from an epoch-derived sub-seed; the
/// final batch of an epoch may be short. Updates compute `w - lr * g` in f64
/// and round once to the storage type.
pub fn sgd_epochs<F: Real, E: Examples>(
    mut p: Params<F>,
    cfg: &CnnConfig,
    data: &E,
    t: &TrainConfig,
) -> Result<Params<F>> {
    cfg.validate()?;
    t.validate()?;
    p.matches_config(cfg)?;
    if data.len() == 0 {
        return Err(Error::input("cannot train on an empty shard"));
    }
    check_examples(cfg, data)?;
    for epoch in 0..t.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_from_seed(derive_seed(t.seed, &[epoch as u64])));
        for batch_idx in order.chunks(t.batch_size) {
            let src = ExampleBatch {
                data,
                idx: batch_idx,
            };
            let (_, grad) = batch_loss_grad_impl(&p, cfg, &src);
            apply_update(&mut p, &grad, t.learning_rate);
        }
    }
    Ok(p)
}

fn apply_update<F: Real>(p: &mut Params<F>, g: &Params<F>, lr: f64) {
    for (pt, gt) in [
        (&mut p.conv_w, &g.conv_w),
        (&mut p.conv_b, &g.conv_b),
        (&mut p.fc_w, &g.fc_w),
        (&mut p.fc_b, &g.fc_b),
    ] {
        for (w, gv) in pt.data.iter_mut().zip(&gt.data) {
            *w = F::from_f64(w.to_f64() - lr * gv.to_f64());
        }
    }
}

/// Prediction and loss for one evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    /// Argmax of the posteriors; ties resolve to the lowest class index.
    pub pred: u8,
    pub loss: f64,
}

/// Forward-only evaluation of `idx` within `data`, in order.
pub fn evaluate_samples<F: Real, E: Examples>(
    p: &Params<F>,
    cfg: &CnnConfig,
    data: &E,
    idx: &[usize],
) -> Result<Vec<SampleEval>> {
    cfg.validate()?;
    p.matches_config(cfg)?;
    check_examples(cfg, data)?;
    let d = cfg.dims();
    let chunks: Vec<Vec<SampleEval>> = (0..idx.len().div_ceil(EVAL_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * EVAL_CHUNK;
            let hi = (lo + EVAL_CHUNK).min(idx.len());
            let mut s = Scratch::<F>::new(cfg, &d);
            let mut out = Vec::with_capacity(hi - lo);
            for &i in &idx[lo..hi] {
                for (o, &px) in s.x.iter_mut().zip(data.pixels(i)) {
                    *o = F::from_f64(PIXEL_LUT[px as usize]);
                }
                forward_sample(cfg, &d, p, &mut s);
                let mut pred = 0usize;
                for c in 1..cfg.num_classes {
                    if s.probs[c] > s.probs[pred] {
                        pred = c;
                    }
                }
                out.push(SampleEval {
                    pred: pred as u8,
                    loss: sample_loss(&s, data.label(i) as usize),
                });
            }
            out
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}
