use super::io::{load_params, params_from_bytes, params_to_bytes, save_params};
use super::*;
use crate::dataset::Dataset;

use rand::Rng;

fn small_cfg() -> CnnConfig {
    CnnConfig {
        input_h: 16,
        input_w: 16,
        conv_filters: 3,
        conv_kernel: 3,
        conv_stride: 1,
        pool_size: 2,
        num_classes: 6,
    }
}

fn random_batch<F: Real>(cfg: &CnnConfig, b: usize, seed: u64) -> Tensor<F> {
    let mut rng = crate::rng::rng_from_seed(seed);
    let data = (0..b * cfg.input_h * cfg.input_w)
        .map(|_| F::from_f64(rng.gen_range(0.0..1.0)))
        .collect();
    Tensor::from_vec(&[b, 1, cfg.input_h, cfg.input_w], data).unwrap()
}

fn toy_dataset(cfg: &CnnConfig, n: usize, seed: u64) -> Dataset {
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut ds = Dataset::new(cfg.input_h, cfg.input_w, cfg.num_classes as u8).unwrap();
    for i in 0..n {
        let px: Vec<u8> = (0..cfg.input_h * cfg.input_w)
            .map(|_| rng.gen::<u8>())
            .collect();
        ds.push((i % cfg.num_classes) as u8, &px).unwrap();
    }
    ds
}

#[test]
fn zero_params_give_uniform_posteriors() {
    let cfg = small_cfg();
    let p = Params::<f32>::zeros(&cfg);
    let batch = random_batch::<f32>(&cfg, 3, 1);
    let out = forward(&p, &cfg, &batch).unwrap();
    for &v in &out.data {
        assert!((v - 1.0 / 6.0).abs() < 1e-6);
    }
}

#[test]
fn duplicated_sample_gives_identical_rows() {
    let cfg = small_cfg();
    let p = Params::<f32>::init(&cfg, 7);
    let one = random_batch::<f32>(&cfg, 1, 2);
    let mut two_data = one.data.clone();
    two_data.extend_from_slice(&one.data);
    let two = Tensor::from_vec(&[2, 1, cfg.input_h, cfg.input_w], two_data).unwrap();
    let out = forward(&p, &cfg, &two).unwrap();
    assert_eq!(out.data[..6], out.data[6..]);
}

#[test]
fn posterior_rows_sum_to_one() {
    let cfg = small_cfg();
    for seed in 0..5 {
        let p = Params::<f32>::init(&cfg, seed);
        let batch = random_batch::<f32>(&cfg, 4, seed + 100);
        let out = forward(&p, &cfg, &batch).unwrap();
        for row in out.data.chunks(cfg.num_classes) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

/// Independent nested-loop forward pass in f64: direct convolution sums,
/// pooling by explicit window scan, dense FC, plain softmax.
fn forward_oracle(cfg: &CnnConfig, p: &Params<f64>, x: &[f64]) -> Vec<f64> {
    let d = cfg.dims();
    let k = cfg.conv_kernel;
    let mut relu = vec![0.0f64; cfg.conv_filters * d.conv_h * d.conv_w];
    for f in 0..cfg.conv_filters {
        for oi in 0..d.conv_h {
            for oj in 0..d.conv_w {
                let mut acc = p.conv_b.data[f];
                for ki in 0..k {
                    for kj in 0..k {
                        let xi = (oi * cfg.conv_stride + ki) * cfg.input_w
                            + oj * cfg.conv_stride
                            + kj;
                        acc += p.conv_w.data[(f * k + ki) * k + kj] * x[xi];
                    }
                }
                relu[(f * d.conv_h + oi) * d.conv_w + oj] = acc.max(0.0);
            }
        }
    }
    let mut pool = vec![0.0f64; d.feat];
    for f in 0..cfg.conv_filters {
        for pi in 0..d.pool_h {
            for pj in 0..d.pool_w {
                let mut best = f64::NEG_INFINITY;
                for di in 0..cfg.pool_size {
                    for dj in 0..cfg.pool_size {
                        let v = relu[(f * d.conv_h + pi * cfg.pool_size + di) * d.conv_w
                            + pj * cfg.pool_size
                            + dj];
                        best = best.max(v);
                    }
                }
                pool[(f * d.pool_h + pi) * d.pool_w + pj] = best;
            }
        }
    }
    let mut logits = vec![0.0f64; cfg.num_classes];
    for c in 0..cfg.num_classes {
        let mut acc = p.fc_b.data[c];
        for kk in 0..d.feat {
            acc += p.fc_w.data[c * d.feat + kk] * pool[kk];
        }
        logits[c] = acc;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[test]
fn forward_matches_nested_loop_oracle() {
    let cfg = small_cfg();
    let p = Params::<f32>::init(&cfg, 31);
    let batch = random_batch::<f32>(&cfg, 2, 32);
    let out = forward(&p, &cfg, &batch).unwrap();
    let p64 = p.convert::<f64>();
    let dim = cfg.input_h * cfg.input_w;
    for b in 0..2 {
        let x: Vec<f64> = batch.data[b * dim..(b + 1) * dim]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let want = forward_oracle(&cfg, &p64, &x);
        for c in 0..cfg.num_classes {
            let got = out.data[b * cfg.num_classes + c] as f64;
            assert!(
                (got - want[c]).abs() < 1e-5,
                "sample {b} class {c}: {got} vs {}",
                want[c]
            );
        }
    }
}

#[test]
fn zero_params_loss_is_ln_six() {
    let cfg = small_cfg();
    let p = Params::<f32>::zeros(&cfg);
    let batch = random_batch::<f32>(&cfg, 4, 5);
    let labels = [0u8, 1, 2, 3];
    let (loss, _) = loss_and_grad(&p, &cfg, &batch, &labels).unwrap();
    assert!((loss - 6.0f64.ln()).abs() < 1e-9, "loss {loss}");
}

#[test]
fn saturated_bias_drives_loss_to_zero() {
    let cfg = small_cfg();
    let mut p = Params::<f32>::zeros(&cfg);
    p.fc_b.data[2] = 20.0;
    let batch = random_batch::<f32>(&cfg, 3, 6);
    let labels = [2u8, 2, 2];
    let (loss, _) = loss_and_grad(&p, &cfg, &batch, &labels).unwrap();
    assert!(loss < 1e-6, "loss {loss}");
}

#[test]
fn label_out_of_range_is_an_input_error() {
    let cfg = small_cfg();
    let p = Params::<f32>::zeros(&cfg);
    let batch = random_batch::<f32>(&cfg, 1, 6);
    assert!(matches!(
        loss_and_grad(&p, &cfg, &batch, &[6u8]),
        Err(crate::error::Error::Input(_))
    ));
}

#[test]
fn shape_mismatch_names_the_layer() {
    let cfg = small_cfg();
    let p = Params::<f32>::zeros(&cfg);
    let bad = random_batch::<f32>(
        &CnnConfig {
            input_h: 8,
            input_w: 8,
            ..cfg
        },
        1,
        6,
    );
    match forward(&p, &cfg, &bad) {
        Err(crate::error::Error::Shape { context, .. }) => assert_eq!(context, "input"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

/// Central finite differences against the analytic gradient, both in f64.
#[test]
fn gradient_matches_finite_differences() {
    let cfg = CnnConfig {
        input_h: 8,
        input_w: 8,
        conv_filters: 2,
        conv_kernel: 3,
        conv_stride: 1,
        pool_size: 2,
        num_classes: 6,
    };
    let p = Params::<f64>::init(&cfg, 77);
    let batch = random_batch::<f64>(&cfg, 2, 78);
    let labels = [1u8, 4];
    let (_, grad) = loss_and_grad(&p, &cfg, &batch, &labels).unwrap();
    let analytic = grad.flatten();
    let flat = p.flatten();
    let h = 1e-3;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = batch_loss(&Params::unflatten(&cfg, &plus).unwrap(), &cfg, &batch, &labels).unwrap();
        let lm = batch_loss(&Params::unflatten(&cfg, &minus).unwrap(), &cfg, &batch, &labels).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let diff = (analytic[i] - fd).abs();
        let rel = diff / analytic[i].abs().max(fd.abs()).max(1e-12);
        assert!(
            diff < 1e-6 || rel < 1e-4,
            "coord {i}: analytic {} vs fd {fd} (rel {rel:.2e})",
            analytic[i]
        );
    }
}

#[test]
fn sgd_with_zero_learning_rate_is_identity() {
    let cfg = small_cfg();
    let data = toy_dataset(&cfg, 10, 1);
    let p = Params::<f32>::init(&cfg, 2);
    let t = TrainConfig {
        learning_rate: 0.0,
        epochs: 3,
        batch_size: 4,
        seed: 9,
    };
    let out = sgd_epochs(p.clone(), &cfg, &data, &t).unwrap();
    assert_eq!(out, p);
}

#[test]
fn one_full_batch_epoch_is_one_gradient_step() {
    let cfg = small_cfg();
    let data = toy_dataset(&cfg, 8, 3);
    let p = Params::<f32>::init(&cfg, 4);
    let t = TrainConfig {
        learning_rate: 0.05,
        epochs: 1,
        batch_size: 8,
        seed: 11,
    };
    let stepped = sgd_epochs(p.clone(), &cfg, &data, &t).unwrap();

    // Expected: p - lr * grad over the whole shard (order-independent since
    // there is exactly one batch).
    let dim = cfg.input_h * cfg.input_w;
    let mut bdata = Vec::with_capacity(8 * dim);
    let mut labels = Vec::new();
    use crate::nn::Examples;
    for i in 0..8 {
        bdata.extend(data.pixels(i).iter().map(|&px| (px as f64 / 255.0) as f32));
        labels.push(data.label(i));
    }
    let batch = Tensor::from_vec(&[8, 1, cfg.input_h, cfg.input_w], bdata).unwrap();
    let (_, grad) = loss_and_grad(&p, &cfg, &batch, &labels).unwrap();
    let mut expect = p.clone();
    for (pt, gt) in [
        (&mut expect.conv_w, &grad.conv_w),
        (&mut expect.conv_b, &grad.conv_b),
        (&mut expect.fc_w, &grad.fc_w),
        (&mut expect.fc_b, &grad.fc_b),
    ] {
        for (w, g) in pt.data.iter_mut().zip(&gt.data) {
            *w = ((*w as f64) - 0.05 * (*g as f64)) as f32;
        }
    }
    assert_eq!(stepped, expect);
}

#[test]
fn training_reduces_loss_on_small_shard() {
    let cfg = small_cfg();
    let data = toy_dataset(&cfg, 12, 5);
    let p = Params::<f32>::init(&cfg, 6);
    let t = TrainConfig {
        learning_rate: 0.05,
        epochs: 50,
        batch_size: 4,
        seed: 12,
    };
    let idx: Vec<usize> = (0..12).collect();
    let before: f64 = evaluate_samples(&p, &cfg, &data, &idx)
        .unwrap()
        .iter()
        .map(|e| e.loss)
        .sum();
    let trained = sgd_epochs(p, &cfg, &data, &t).unwrap();
    let after: f64 = evaluate_samples(&trained, &cfg, &data, &idx)
        .unwrap()
        .iter()
        .map(|e| e.loss)
        .sum();
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = small_cfg();
    let data = toy_dataset(&cfg, 20, 7);
    let t = TrainConfig {
        learning_rate: 0.01,
        epochs: 3,
        batch_size: 6,
        seed: 21,
    };
    let a = sgd_epochs(Params::<f32>::init(&cfg, 8), &cfg, &data, &t).unwrap();
    let b = sgd_epochs(Params::<f32>::init(&cfg, 8), &cfg, &data, &t).unwrap();
    assert_eq!(params_to_bytes(&a), params_to_bytes(&b));
}

#[test]
fn flatten_unflatten_round_trips() {
    let cfg = small_cfg();
    let p = Params::<f32>::init(&cfg, 9);
    let flat = p.flatten();
    assert_eq!(flat.len(), p.num_params());
    let back = Params::unflatten(&cfg, &flat).unwrap();
    assert_eq!(back, p);
    assert!(Params::<f32>::unflatten(&cfg, &flat[1..]).is_err());
}

#[test]
fn fjwt_round_trip_is_bit_identical() {
    let cfg = small_cfg();
    let p = Params::<f32>::init(&cfg, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.fjwt");
    save_params(&path, &p).unwrap();
    let loaded = load_params(&path, &cfg).unwrap();
    assert_eq!(loaded, p);
    assert_eq!(params_to_bytes(&loaded), std::fs::read(&path).unwrap());
}

#[test]
fn fjwt_truncation_names_the_tensor() {
    let cfg = small_cfg();
    let p = Params::<f32>::init(&cfg, 11);
    let bytes = params_to_bytes(&p);
    match params_from_bytes(&bytes[..bytes.len() - 2], &cfg) {
        Err(crate::error::Error::Format { msg, .. }) => {
            assert!(msg.contains("fc_b"), "{msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
    assert!(matches!(
        params_from_bytes(b"XJWT", &cfg),
        Err(crate::error::Error::Format { offset: 0, .. })
    ));
}

#[test]
fn fjwt_rejects_mismatched_class_count() {
    let cfg = small_cfg();
    let p = Params::<f32>::init(&cfg, 12);
    let bytes = params_to_bytes(&p);
    let five = CnnConfig {
        num_classes: 5,
        ..cfg
    };
    match params_from_bytes(&bytes, &five) {
        Err(crate::error::Error::Shape { context, .. }) => assert_eq!(context, "fc_w"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn config_validation_catches_bad_geometry() {
    let mut cfg = small_cfg();
    cfg.conv_kernel = 20;
    assert!(cfg.validate().is_err());
    let mut cfg = small_cfg();
    cfg.conv_stride = 3; // (16 - 3) % 3 != 0
    assert!(cfg.validate().is_err());
    let mut cfg = small_cfg();
    cfg.pool_size = 20;
    assert!(cfg.validate().is_err());
    let mut cfg = small_cfg();
    cfg.num_classes = 1;
    assert!(cfg.validate().is_err());
}
