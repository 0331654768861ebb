//! FedAvg orchestration and the centralized baseline trainer.
//!
//! Every round, all clients train from the broadcast global model for a
//! fixed number of local epochs, and the server replaces the global model
//! with the sample-count-weighted average of the local results. Client jobs
//! within a round are independent and run in parallel; the outcome is
//! bitwise identical to sequential execution.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PartitionMap, Subset};
use crate::error::{Error, Result};
use crate::nn::{evaluate_samples, sgd_epochs, CnnConfig, Examples, ModelParams, TrainConfig};
use crate::rng::derive_seed;

/// Federated run parameters. `train.epochs` and `train.seed` are ignored:
/// local passes come from `local_epochs` and every client gets a sub-seed
/// derived from `(seed, round, client)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub train: TrainConfig,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 20,
            rounds: 400,
            local_epochs: 1,
            train: TrainConfig::default(),
            eval_every: 1,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be positive"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        self.train.validate()
    }
}

/// Global metrics at one evaluated communication round (or epoch, for the
/// centralized trainer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_test_accuracy: f64,
    pub global_test_loss: f64,
    pub wall_seconds: f64,
}

/// Sample-count-weighted parameter average, Eq.-style: `sum_i (N_i/N) w_i`.
///
/// Coordinates accumulate in f64 and round once to f32, so scaling every
/// weight by a common factor leaves the output bitwise unchanged.
pub fn aggregate(locals: &[(ModelParams, u64)]) -> Result<ModelParams> {
    let (first, _) = locals
        .first()
        .ok_or_else(|| Error::config("aggregate needs at least one client model"))?;
    for (i, (p, n)) in locals.iter().enumerate() {
        if !p.same_shapes(first) {
            return Err(Error::Aggregation {
                client: i,
                msg: "parameter shapes differ from client 0".to_string(),
            });
        }
        if *n == 0 {
            return Err(Error::Aggregation {
                client: i,
                msg: "client weight must be at least 1".to_string(),
            });
        }
    }
    let total: u64 = locals.iter().map(|(_, n)| n).sum();
    let mut acc = vec![0.0f64; first.num_params()];
    for (p, n) in locals {
        let coeff = *n as f64 / total as f64;
        let mut at = 0usize;
        for (_, tensor) in p.tensors() {
            for &v in &tensor.data {
                acc[at] += coeff * v as f64;
                at += 1;
            }
        }
    }
    let cast: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    let mut out = first.clone();
    let mut at = 0usize;
    for t in [&mut out.conv_w, &mut out.conv_b, &mut out.fc_w, &mut out.fc_b] {
        let n = t.len();
        t.data.copy_from_slice(&cast[at..at + n]);
        at += n;
    }
    Ok(out)
}

fn evaluate_global(
    params: &ModelParams,
    cfg: &CnnConfig,
    data: &Dataset,
    test_idx: &[usize],
) -> Result<(f64, f64)> {
    let evals = evaluate_samples(params, cfg, data, test_idx)?;
    let correct = evals
        .iter()
        .zip(test_idx)
        .filter(|(e, &i)| e.pred == data.label(i))
        .count();
    let loss: f64 = evals.iter().map(|e| e.loss).sum::<f64>() / evals.len() as f64;
    Ok((correct as f64 / evals.len() as f64, loss))
}

fn check_run_inputs(
    data: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &CnnConfig,
) -> Result<()> {
    cfg.validate()?;
    if data.height() != cfg.input_h || data.width() != cfg.input_w {
        return Err(Error::config(format!(
            "dataset images are {}x{}, model expects {}x{}",
            data.height(),
            data.width(),
            cfg.input_h,
            cfg.input_w
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if test_idx.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    Ok(())
}

/// Run FedAvg and return the final global model plus the evaluated rounds.
///
/// `on_round` fires after every aggregation with the current global model
/// and, on evaluation rounds, the fresh metrics; use it for checkpointing or
/// progress logging.
pub fn run_fedavg(
    data: &Dataset,
    parts: &PartitionMap,
    test_idx: &[usize],
    cfg: &CnnConfig,
    fed: &FedConfig,
    mut on_round: impl FnMut(usize, &ModelParams, Option<&RoundRecord>) -> Result<()>,
) -> Result<(ModelParams, Vec<RoundRecord>)> {
    fed.validate()?;
    parts.validate()?;
    if fed.num_clients != parts.num_clients {
        return Err(Error::config(format!(
            "fed config wants {} clients but partition has {}",
            fed.num_clients, parts.num_clients
        )));
    }
    let train_count: usize = parts.assignments.iter().map(Vec::len).sum();
    let all_train: Vec<usize> = parts.assignments.iter().flatten().copied().collect();
    check_run_inputs(data, &all_train, test_idx, cfg)?;
    debug_assert_eq!(train_count, all_train.len());

    let start = Instant::now();
    let mut global = ModelParams::init(cfg, derive_seed(fed.seed, &[0]));
    let mut records = Vec::new();
    for round in 1..=fed.rounds {
        let locals: Vec<Result<(ModelParams, u64)>> = parts
            .assignments
            .par_iter()
            .enumerate()
            .map(|(client, shard)| {
                let subset = Subset::new(data, shard)?;
                let tc = TrainConfig {
                    learning_rate: fed.train.learning_rate,
                    epochs: fed.local_epochs,
                    batch_size: fed.train.batch_size,
                    seed: derive_seed(fed.seed, &[round as u64, client as u64]),
                };
                let updated = sgd_epochs(global.clone(), cfg, &subset, &tc)?;
                Ok((updated, shard.len() as u64))
            })
            .collect();
        let locals: Vec<(ModelParams, u64)> = locals.into_iter().collect::<Result<_>>()?;
        global = aggregate(&locals)?;
        let mut evaluated = None;
        if round % fed.eval_every == 0 || round == fed.rounds {
            let (accuracy, loss) = evaluate_global(&global, cfg, data, test_idx)?;
            records.push(RoundRecord {
                round,
                global_test_accuracy: accuracy,
                global_test_loss: loss,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            evaluated = records.last();
        }
        on_round(round, &global, evaluated)?;
    }
    Ok((global, records))
}

/// Plain SGD over the whole training split, evaluated after every epoch.
/// `train.epochs` is the total epoch budget. Seed scheduling mirrors the
/// federated path so an M=1, one-local-epoch FedAvg run is bitwise equal to
/// this trainer at the same seed.
pub fn run_centralized(
    data: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &CnnConfig,
    train: &TrainConfig,
) -> Result<(ModelParams, Vec<RoundRecord>)> {
    train.validate()?;
    check_run_inputs(data, train_idx, test_idx, cfg)?;
    let shard = Subset::new(data, train_idx)?;
    if shard.len() == 0 {
        return Err(Error::config("training split is empty"));
    }

    let start = Instant::now();
    let mut params = ModelParams::init(cfg, derive_seed(train.seed, &[0]));
    let mut records = Vec::new();
    for epoch in 1..=train.epochs {
        let tc = TrainConfig {
            learning_rate: train.learning_rate,
            epochs: 1,
            batch_size: train.batch_size,
            seed: derive_seed(train.seed, &[epoch as u64, 0]),
        };
        params = sgd_epochs(params, cfg, &shard, &tc)?;
        let (accuracy, loss) = evaluate_global(&params, cfg, data, test_idx)?;
        records.push(RoundRecord {
            round: epoch,
            global_test_accuracy: accuracy,
            global_test_loss: loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{partition_iid, PartitionMode};
    use crate::nn::Params;
    use rand::Rng;

    fn small_cfg() -> CnnConfig {
        CnnConfig {
            input_h: 12,
            input_w: 12,
            conv_filters: 2,
            conv_kernel: 3,
            conv_stride: 1,
            pool_size: 2,
            num_classes: 6,
        }
    }

    fn toy_dataset(cfg: &CnnConfig, n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::rng_from_seed(seed);
        let mut ds = Dataset::new(cfg.input_h, cfg.input_w, 6).unwrap();
        for i in 0..n {
            let px: Vec<u8> = (0..cfg.input_h * cfg.input_w)
                .map(|_| rng.gen::<u8>())
                .collect();
            ds.push((i % 6) as u8, &px).unwrap();
        }
        ds
    }

    #[test]
    fn single_client_aggregate_is_identity() {
        let cfg = small_cfg();
        let p = Params::<f32>::init(&cfg, 1);
        let out = aggregate(&[(p.clone(), 1)]).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn opposite_models_cancel() {
        let cfg = small_cfg();
        let p = Params::<f32>::init(&cfg, 2);
        let mut neg = p.clone();
        for t in [&mut neg.conv_w, &mut neg.conv_b, &mut neg.fc_w, &mut neg.fc_b] {
            for v in &mut t.data {
                *v = -*v;
            }
        }
        let out = aggregate(&[(p, 2), (neg, 2)]).unwrap();
        assert!(out.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_mean_matches_hand_value() {
        let cfg = small_cfg();
        let zero = Params::<f32>::zeros(&cfg);
        let mut four = Params::<f32>::zeros(&cfg);
        for t in [&mut four.conv_w, &mut four.conv_b, &mut four.fc_w, &mut four.fc_b] {
            for v in &mut t.data {
                *v = 4.0;
            }
        }
        let out = aggregate(&[(zero, 1), (four, 3)]).unwrap();
        assert!(out.flatten().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn aggregate_matches_f64_reference() {
        let cfg = small_cfg();
        let locals: Vec<(ModelParams, u64)> = (0..5)
            .map(|i| (Params::<f32>::init(&cfg, 100 + i), (i + 1) as u64))
            .collect();
        let out = aggregate(&locals).unwrap().flatten();
        let total: u64 = locals.iter().map(|(_, n)| n).sum();
        let coeffs: Vec<f64> = locals.iter().map(|(_, n)| *n as f64 / total as f64).collect();
        assert!((coeffs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let flats: Vec<Vec<f32>> = locals.iter().map(|(p, _)| p.flatten()).collect();
        for k in 0..out.len() {
            let want: f64 = flats.iter().zip(&coeffs).map(|(f, c)| c * f[k] as f64).sum();
            let got = out[k] as f64;
            let denom = want.abs().max(1e-30);
            assert!((got - want).abs() / denom < 1e-6, "coord {k}: {got} vs {want}");
        }
    }

    #[test]
    fn aggregate_is_scale_invariant_in_weights() {
        let cfg = small_cfg();
        let locals: Vec<(ModelParams, u64)> = (0..4)
            .map(|i| (Params::<f32>::init(&cfg, 50 + i), 2 * i + 1))
            .collect();
        let scaled: Vec<(ModelParams, u64)> = locals
            .iter()
            .map(|(p, n)| (p.clone(), n * 1000))
            .collect();
        assert_eq!(aggregate(&locals).unwrap(), aggregate(&scaled).unwrap());
    }

    #[test]
    fn aggregate_names_the_bad_client() {
        let cfg = small_cfg();
        let p = Params::<f32>::init(&cfg, 1);
        let other = Params::<f32>::init(
            &CnnConfig {
                conv_filters: 3,
                ..cfg
            },
            1,
        );
        match aggregate(&[(p.clone(), 1), (other, 1)]) {
            Err(Error::Aggregation { client, .. }) => assert_eq!(client, 1),
            other => panic!("expected aggregation error, got {other:?}"),
        }
        match aggregate(&[(p.clone(), 1), (p, 0)]) {
            Err(Error::Aggregation { client, .. }) => assert_eq!(client, 1),
            other => panic!("expected aggregation error, got {other:?}"),
        }
    }

    #[test]
    fn single_client_fedavg_equals_centralized() {
        let cfg = small_cfg();
        let data = toy_dataset(&cfg, 18, 5);
        let train: Vec<usize> = (0..12).collect();
        let test: Vec<usize> = (12..18).collect();
        let parts = partition_iid(data.labels(), &train, 1, 99).unwrap();
        let fed = FedConfig {
            num_clients: 1,
            rounds: 3,
            local_epochs: 1,
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 4,
                ..TrainConfig::default()
            },
            eval_every: 1,
            seed: 42,
        };
        let (fed_params, fed_records) =
            run_fedavg(&data, &parts, &test, &cfg, &fed, |_, _, _| Ok(())).unwrap();
        let central = TrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 4,
            seed: 42,
        };
        let (c_params, c_records) = run_centralized(&data, &train, &test, &cfg, &central).unwrap();
        assert_eq!(fed_params, c_params);
        assert_eq!(fed_records.len(), c_records.len());
        for (f, c) in fed_records.iter().zip(&c_records) {
            assert_eq!(f.global_test_accuracy, c.global_test_accuracy);
            assert_eq!(f.global_test_loss, c.global_test_loss);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_model() {
        let cfg = small_cfg();
        let data = toy_dataset(&cfg, 12, 6);
        let train: Vec<usize> = (0..9).collect();
        let test: Vec<usize> = (9..12).collect();
        let parts = partition_iid(data.labels(), &train, 3, 1).unwrap();
        let fed = FedConfig {
            num_clients: 3,
            rounds: 2,
            local_epochs: 1,
            train: TrainConfig {
                learning_rate: 0.0,
                batch_size: 4,
                ..TrainConfig::default()
            },
            eval_every: 2,
            seed: 7,
        };
        let (params, _) = run_fedavg(&data, &parts, &test, &cfg, &fed, |_, _, _| Ok(())).unwrap();
        let init = ModelParams::init(&cfg, derive_seed(7, &[0]));
        assert_eq!(params, init);
    }

    #[test]
    fn fedavg_is_deterministic() {
        let cfg = small_cfg();
        let data = toy_dataset(&cfg, 20, 8);
        let train: Vec<usize> = (0..16).collect();
        let test: Vec<usize> = (16..20).collect();
        let parts = partition_iid(data.labels(), &train, 4, 3).unwrap();
        let fed = FedConfig {
            num_clients: 4,
            rounds: 2,
            local_epochs: 2,
            train: TrainConfig {
                learning_rate: 0.02,
                batch_size: 2,
                ..TrainConfig::default()
            },
            eval_every: 1,
            seed: 31,
        };
        let (p1, r1) = run_fedavg(&data, &parts, &test, &cfg, &fed, |_, _, _| Ok(())).unwrap();
        let (p2, r2) = run_fedavg(&data, &parts, &test, &cfg, &fed, |_, _, _| Ok(())).unwrap();
        assert_eq!(p1, p2);
        let acc1: Vec<f64> = r1.iter().map(|r| r.global_test_accuracy).collect();
        let acc2: Vec<f64> = r2.iter().map(|r| r.global_test_accuracy).collect();
        assert_eq!(acc1, acc2);
    }

    #[test]
    fn empty_shard_is_rejected() {
        let cfg = small_cfg();
        let data = toy_dataset(&cfg, 12, 9);
        let test: Vec<usize> = (9..12).collect();
        let parts = PartitionMap {
            num_clients: 2,
            assignments: vec![(0..9).collect(), Vec::new()],
            seed: 0,
            mode: PartitionMode::Iid,
        };
        let fed = FedConfig {
            num_clients: 2,
            rounds: 1,
            local_epochs: 1,
            train: TrainConfig::default(),
            eval_every: 1,
            seed: 0,
        };
        assert!(matches!(
            run_fedavg(&data, &parts, &test, &cfg, &fed, |_, _, _| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn centralized_rejects_empty_splits() {
        let cfg = small_cfg();
        let data = toy_dataset(&cfg, 12, 10);
        let t = TrainConfig::default();
        assert!(matches!(
            run_centralized(&data, &[], &[0], &cfg, &t),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_centralized(&data, &[0, 1], &[], &cfg, &t),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_records_are_strictly_increasing() {
        let cfg = small_cfg();
        let data = toy_dataset(&cfg, 14, 11);
        let train: Vec<usize> = (0..10).collect();
        let test: Vec<usize> = (10..14).collect();
        let parts = partition_iid(data.labels(), &train, 2, 4).unwrap();
        let fed = FedConfig {
            num_clients: 2,
            rounds: 5,
            local_epochs: 1,
            train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            eval_every: 2,
            seed: 13,
        };
        let (_, records) = run_fedavg(&data, &parts, &test, &cfg, &fed, |_, _, _| Ok(())).unwrap();
        let rounds: Vec<usize> = records.iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![2, 4, 5]);
        for w in records.windows(2) {
            assert!(w[0].round < w[1].round);
        }
    }
}
