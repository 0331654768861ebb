//! Resolved run configuration: one TOML document covering every stage.
//!
//! CLI flags override individual fields; each run writes its resolved
//! configuration next to its outputs so it can be re-run bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CnnConfig, TrainConfig};
use crate::siggen::{GenConfig, JammerClass, RenderConfig, SignalConfig, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSection {
    pub per_class: usize,
    pub jsr_lo: f64,
    pub jsr_hi: f64,
    pub seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            per_class: 200,
            jsr_lo: 20.0,
            jsr_hi: 40.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSection {
    pub mode: String,
    pub beta: f64,
    pub clients: usize,
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            mode: "iid".to_string(),
            beta: 0.1,
            clients: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FedSection {
    fn default() -> Self {
        FedSection {
            rounds: 400,
            local_epochs: 1,
            eval_every: 1,
            seed: 0,
        }
    }
}

/// The whole experiment configuration, with module defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub gen: GenSection,
    pub signal: SignalConfig,
    pub stft: StftConfig,
    pub render: RenderConfig,
    pub split: SplitSection,
    pub partition: PartitionSection,
    pub cnn: CnnConfig,
    pub train: TrainConfig,
    pub fed: FedSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("bad config file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("config serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Assemble the dataset-synthesis config from the gen/signal/stft/render
    /// sections. All six classes are always generated.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            per_class: self.gen.per_class,
            classes: JammerClass::ALL.to_vec(),
            signal: self.signal,
            jsr_db: (self.gen.jsr_lo, self.gen.jsr_hi),
            stft: self.stft,
            render: self.render,
            master_seed: self.gen.seed,
        }
    }

    /// CNN geometry for a given image size.
    pub fn cnn_for(&self, height: usize, width: usize) -> CnnConfig {
        CnnConfig {
            input_h: height,
            input_w: width,
            ..self.cnn
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.gen.per_class = 37;
        cfg.signal.noise_power = 0.5;
        cfg.signal.class_params.nb.q = 12.0;
        cfg.partition.mode = "dirichlet".to_string();
        cfg.fed.rounds = 123;
        cfg.train.learning_rate = 0.005;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.toml");
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn defaults_parse_from_empty_document() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.fed.rounds, 400);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.cnn.conv_filters, 16);
        assert_eq!(cfg.cnn.conv_kernel, 12);
    }

    #[test]
    fn bad_toml_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "gen = 5").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }
}
