//! Client partitioning of the training set: IID and Dirichlet non-IID.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// How the training samples were distributed across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    Iid,
    Dirichlet { beta: f64 },
}

/// Assignment of training-set indices to `num_clients` disjoint shards.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    pub num_clients: usize,
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
    pub mode: PartitionMode,
}

impl PartitionMap {
    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Structural invariants: one list per client, every list non-empty,
    /// no index assigned twice.
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.assignments.len() != self.num_clients {
            return Err(Error::config(format!(
                "partition has {} lists for {} clients",
                self.assignments.len(),
                self.num_clients
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (client, list) in self.assignments.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::config(format!("client {client} has an empty shard")));
            }
            for &idx in list {
                if !seen.insert(idx) {
                    return Err(Error::config(format!(
                        "index {idx} assigned to more than one client"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Check that the shards cover `train` exactly.
    pub fn validate_cover(&self, train: &[usize]) -> Result<()> {
        self.validate()?;
        let mut assigned: Vec<usize> = self.assignments.iter().flatten().copied().collect();
        assigned.sort_unstable();
        let mut expected = train.to_vec();
        expected.sort_unstable();
        if assigned != expected {
            return Err(Error::config(
                "partition does not cover the training set exactly",
            ));
        }
        Ok(())
    }

    /// Complement of the assigned indices within `0..dataset_len`; with a
    /// partition built from a train split this recovers the test split.
    pub fn unassigned(&self, dataset_len: usize) -> Vec<usize> {
        let mut used = vec![false; dataset_len];
        for list in &self.assignments {
            for &i in list {
                if i < dataset_len {
                    used[i] = true;
                }
            }
        }
        (0..dataset_len).filter(|&i| !used[i]).collect()
    }

    /// Per-client class histogram, `num_clients` rows by `num_classes` cols.
    pub fn class_histogram(&self, labels: &[u8], num_classes: u8) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|list| {
                let mut row = vec![0usize; num_classes as usize];
                for &i in list {
                    row[labels[i] as usize] += 1;
                }
                row
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (mode, beta) = match self.mode {
            PartitionMode::Iid => ("iid", None),
            PartitionMode::Dirichlet { beta } => ("dirichlet", Some(beta)),
        };
        let file = PartitionFile {
            mode: mode.to_string(),
            beta,
            seed: self.seed,
            num_clients: self.num_clients,
            assignments: self.assignments.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::format(0, format!("partition serialization failed: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PartitionFile = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("bad partition json: {e}")))?;
        let mode = match file.mode.as_str() {
            "iid" => PartitionMode::Iid,
            "dirichlet" => {
                let beta = file.beta.ok_or_else(|| {
                    Error::format(0, "dirichlet partition is missing `beta`")
                })?;
                PartitionMode::Dirichlet { beta }
            }
            other => return Err(Error::format(0, format!("unknown partition mode `{other}`"))),
        };
        let map = PartitionMap {
            num_clients: file.num_clients,
            assignments: file.assignments,
            seed: file.seed,
            mode,
        };
        map.validate()?;
        Ok(map)
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    mode: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    beta: Option<f64>,
    seed: u64,
    num_clients: usize,
    assignments: Vec<Vec<usize>>,
}

fn check_inputs(labels: &[u8], train: &[usize], num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::config("num_clients must be positive"));
    }
    if train.len() < num_clients {
        return Err(Error::input(format!(
            "cannot split {} training samples across {num_clients} clients",
            train.len()
        )));
    }
    if let Some(&bad) = train.iter().find(|&&i| i >= labels.len()) {
        return Err(Error::input(format!(
            "train index {bad} out of range for {} labels",
            labels.len()
        )));
    }
    Ok(())
}

fn group_by_class(labels: &[u8], train: &[usize]) -> Vec<Vec<usize>> {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in train {
        groups[labels[i] as usize].push(i);
    }
    groups
}

/// IID partition: shuffle within each class, then deal the concatenated
/// stream round-robin with one rotating pointer. Client sizes differ by at
/// most one overall and per class.
pub fn partition_iid(
    labels: &[u8],
    train: &[usize],
    num_clients: usize,
    seed: u64,
) -> Result<PartitionMap> {
    check_inputs(labels, train, num_clients)?;
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    let mut next = 0usize;
    for (class, mut group) in group_by_class(labels, train).into_iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, &[class as u64]));
        group.shuffle(&mut rng);
        for idx in group {
            assignments[next].push(idx);
            next = (next + 1) % num_clients;
        }
    }
    for list in &mut assignments {
        list.sort_unstable();
    }
    let map = PartitionMap {
        num_clients,
        assignments,
        seed,
        mode: PartitionMode::Iid,
    };
    map.validate_cover(train)?;
    Ok(map)
}

/// Split `n` items proportionally to `weights` using largest-remainder
/// rounding; ties go to the lower index. The returned counts sum to `n`.
fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let uniform = 1.0 / weights.len() as f64;
    let share = |w: f64| {
        if sum > 0.0 && sum.is_finite() {
            w / sum
        } else {
            uniform
        }
    };
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut used = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let exact = n as f64 * share(w);
        let base = exact.floor() as usize;
        counts.push(base);
        used += base;
        remainders.push((exact - base as f64, i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(n - used) {
        counts[i] += 1;
    }
    counts
}

/// Move samples from the largest shards until no shard is empty. The lowest
/// dataset index in the largest shard moves first; ties on shard size go to
/// the lower client index.
fn repair_empty_clients(assignments: &mut [Vec<usize>]) {
    loop {
        let Some(empty) = assignments.iter().position(Vec::is_empty) else {
            return;
        };
        let donor = assignments
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty assignment list");
        debug_assert!(assignments[donor].len() >= 2);
        let (pos, _) = assignments[donor]
            .iter()
            .enumerate()
            .min_by_key(|&(_, &v)| v)
            .expect("donor shard is non-empty");
        let moved = assignments[donor].remove(pos);
        assignments[empty].push(moved);
    }
}

/// Label-skewed partition: for each class, draw client proportions from
/// Dirichlet(beta) (as normalized Gamma(beta, 1) draws) and split that
/// class's samples with largest-remainder rounding. Empty shards are then
/// repaired so every client can train.
pub fn partition_dirichlet(
    labels: &[u8],
    train: &[usize],
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionMap> {
    check_inputs(labels, train, num_clients)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config(format!("beta must be positive, got {beta}")));
    }
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::config(format!("invalid Dirichlet concentration {beta}: {e}")))?;
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (class, mut group) in group_by_class(labels, train).into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[class as u64]));
        let weights: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        group.shuffle(&mut rng);
        let counts = largest_remainder(group.len(), &weights);
        let mut start = 0usize;
        for (client, &c) in counts.iter().enumerate() {
            assignments[client].extend_from_slice(&group[start..start + c]);
            start += c;
        }
    }
    repair_empty_clients(&mut assignments);
    for list in &mut assignments {
        list.sort_unstable();
    }
    let map = PartitionMap {
        num_clients,
        assignments,
        seed,
        mode: PartitionMode::Dirichlet { beta },
    };
    map.validate_cover(train)?;
    Ok(map)
}

/// Mean per-client label entropy (nats) of a partition; the skew summary
/// used by the beta-monotonicity property.
pub fn mean_client_entropy(map: &PartitionMap, labels: &[u8], num_classes: u8) -> f64 {
    let hist = map.class_histogram(labels, num_classes);
    let mut total = 0.0;
    for row in &hist {
        let n: usize = row.iter().sum();
        if n == 0 {
            continue;
        }
        let mut h = 0.0;
        for &c in row {
            if c > 0 {
                let p = c as f64 / n as f64;
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / hist.len() as f64
}
