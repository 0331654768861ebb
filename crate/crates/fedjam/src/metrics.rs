//! Accuracy, loss, confusion matrices, and machine-readable outputs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::RoundRecord;
use crate::nn::{evaluate_samples, CnnConfig, Examples, ModelParams};

/// True-class by predicted-class count matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, true_class: usize, pred_class: usize) {
        self.counts[true_class * self.num_classes + pred_class] += 1;
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.num_classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[true_class * self.num_classes..(true_class + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.count(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Diagonal over row sum; `None` when the class never occurs.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let row = self.row_sum(class);
        if row == 0 {
            None
        } else {
            Some(self.count(class, class) as f64 / row as f64)
        }
    }

    pub fn recalls_or_zero(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| self.recall(c).unwrap_or(0.0))
            .collect()
    }
}

/// Result of evaluating one model on one index set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub confusion: ConfusionMatrix,
}

/// Evaluate `params` on `idx` within `data`. Predictions take the argmax of
/// the posteriors with ties resolved to the lowest class index.
pub fn evaluate<E: Examples>(
    params: &ModelParams,
    cfg: &CnnConfig,
    data: &E,
    idx: &[usize],
) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::input("cannot evaluate on an empty index set"));
    }
    let evals = evaluate_samples(params, cfg, data, idx)?;
    let mut confusion = ConfusionMatrix::new(cfg.num_classes);
    let mut loss = 0.0f64;
    for (e, &i) in evals.iter().zip(idx) {
        confusion.add(data.label(i) as usize, e.pred as usize);
        loss += e.loss;
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        mean_loss: loss / evals.len() as f64,
        confusion,
    })
}

/// Format with 6 significant digits, plain notation for moderate magnitudes.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    }
}

/// Write the learning-curve CSV: `round,accuracy,loss,wall_seconds`, one row
/// per evaluated round, LF endings.
pub fn write_curves(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut out = String::from("round,accuracy,loss,wall_seconds\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.round,
            format_sig6(r.global_test_accuracy),
            format_sig6(r.global_test_loss),
            format_sig6(r.wall_seconds)
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Write the confusion-matrix CSV with a per-class recall column. Classes
/// absent from the test set report recall 0 with the `empty_row` flag set.
pub fn write_confusion(cm: &ConfusionMatrix, class_names: &[&str], path: &Path) -> Result<()> {
    assert_eq!(class_names.len(), cm.num_classes);
    let mut out = String::from("true_class");
    for name in class_names {
        out.push_str(&format!(",pred_{name}"));
    }
    out.push_str(",recall,empty_row\n");
    for t in 0..cm.num_classes {
        out.push_str(class_names[t]);
        for p in 0..cm.num_classes {
            out.push_str(&format!(",{}", cm.count(t, p)));
        }
        match cm.recall(t) {
            Some(r) => out.push_str(&format!(",{},0\n", format_sig6(r))),
            None => out.push_str(",0,1\n"),
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One run's headline numbers, written as `run.json` next to the raw curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub setting: String,
    #[serde(rename = "M", skip_serializing_if = "Option::is_none", default)]
    pub num_clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<f64>,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub per_class_recall: Vec<f64>,
}

impl RunSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(0, format!("summary serialization failed: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(0, format!("bad run json: {e}")))
    }
}
