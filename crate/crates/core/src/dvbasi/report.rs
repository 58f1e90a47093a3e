use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSense {
    Max,
    Min,
}

impl MetricSense {
    /// Whether `candidate` beats `best` by more than `tol`.
    pub fn improves(self, candidate: f64, best: f64, tol: f64) -> bool {
        match self {
            Self::Max => candidate > best + tol,
            Self::Min => candidate < best - tol,
        }
    }

    /// Whether `later` is no worse than `earlier`.
    pub fn no_worse(self, later: f64, earlier: f64) -> bool {
        match self {
            Self::Max => later >= earlier,
            Self::Min => later <= earlier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Validation metric of the candidate evaluated after this epoch.
    pub metric: f64,
    /// Mean training loss over the epoch's steps; absent for epoch 0.
    pub train_loss: Option<f64>,
    /// Whether the candidate satisfies the run's constraints.
    pub eligible: bool,
    /// Control-task validation accuracy, for negation runs.
    pub control_accuracy: Option<f64>,
    /// Scaling coefficients of the candidate. Epoch 0 is the unperturbed
    /// starting point and records all zeros.
    pub lambdas: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    pub delta_norm_per_block: Vec<f64>,
    pub delta_norm: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: String,
    pub config: RunConfig,
    /// `anisotropic` or `isotropic`.
    pub scaling: String,
    /// `difference` or `random`.
    pub perturbation: String,
    pub metric: String,
    pub metric_sense: MetricSense,
    pub iterations: Vec<IterationRecord>,
    /// Test accuracy per task at the starting weights.
    pub initial_accuracies: BTreeMap<String, f64>,
    /// Test accuracy per task at the returned weights.
    pub final_accuracies: BTreeMap<String, f64>,
    /// Test accuracy per task of the reference models the relative accuracy
    /// divides by (fine-tuned models, or the pre-trained model where no
    /// fine-tuned reference exists).
    pub reference_accuracies: BTreeMap<String, f64>,
    pub absolute_accuracy: f64,
    pub relative_accuracy: Option<f64>,
    pub details: BTreeMap<String, String>,
    pub assumptions: Vec<String>,
}

fn mean<'a>(it: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl RunReport {
    /// Recomputes the absolute and relative accuracy from the per-task maps.
    pub fn refresh_summary(&mut self) {
        self.absolute_accuracy = mean(self.final_accuracies.values()).unwrap_or(0.0);
        let refs: Vec<f64> = self
            .final_accuracies
            .keys()
            .filter_map(|k| self.reference_accuracies.get(k).copied())
            .collect();
        self.relative_accuracy = if refs.len() == self.final_accuracies.len() {
            mean(refs.iter())
                .filter(|&r| r > 0.0)
                .map(|r| self.absolute_accuracy / r)
        } else {
            None
        };
    }

    pub fn set_reference(&mut self, reference: BTreeMap<String, f64>) {
        self.reference_accuracies = reference;
        self.refresh_summary();
    }

    pub fn initial_mean_accuracy(&self) -> f64 {
        mean(self.initial_accuracies.values()).unwrap_or(0.0)
    }

    /// Selected best metric of every iteration, in order.
    pub fn best_metrics(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.best_metric).collect()
    }

    pub fn best_metrics_monotone(&self) -> bool {
        self.best_metrics()
            .windows(2)
            .all(|w| self.metric_sense.no_worse(w[1], w[0]))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        for it in &r.iterations {
            if it.epochs.is_empty() || it.best_epoch >= it.epochs.len() {
                return Err(Error::Format(format!(
                    "iteration {} has no epoch matching best_epoch {}",
                    it.iteration, it.best_epoch
                )));
            }
        }
        Ok(r)
    }

    /// `iteration,epoch,metric,global_delta_norm,best_flag`, one row per
    /// evaluated epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,epoch,metric,global_delta_norm,best_flag\n");
        for it in &self.iterations {
            for e in &it.epochs {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    it.iteration,
                    e.epoch,
                    e.metric,
                    it.delta_norm,
                    u8::from(e.epoch == it.best_epoch)
                );
            }
        }
        out
    }

    /// Plain-text table with one row per iteration.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "protocol={} scaling={} perturbation={} metric={} ({})",
            self.protocol,
            self.scaling,
            self.perturbation,
            self.metric,
            match self.metric_sense {
                MetricSense::Max => "higher is better",
                MetricSense::Min => "lower is better",
            }
        );
        let _ = writeln!(
            out,
            "{:>9} {:>7} {:>10} {:>12} {:>12} {:>8}",
            "iteration", "epochs", "best_epoch", "best_metric", "delta_norm", "stopped"
        );
        for it in &self.iterations {
            let _ = writeln!(
                out,
                "{:>9} {:>7} {:>10} {:>12.6} {:>12.6} {:>8}",
                it.iteration,
                it.epochs.len(),
                it.best_epoch,
                it.best_metric,
                it.delta_norm,
                if it.stopped_early { "early" } else { "max" }
            );
        }
        out
    }

    /// Per-task accuracy table with absolute and relative summary lines.
    pub fn accuracy_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>9} {:>9} {:>9}", "task", "initial", "final", "reference");
        for (task, acc) in &self.final_accuracies {
            let fmt = |m: &BTreeMap<String, f64>| {
                m.get(task).map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
            };
            let _ = writeln!(
                out,
                "{:<22} {:>9} {:>9.2} {:>9}",
                task,
                fmt(&self.initial_accuracies),
                100.0 * acc,
                fmt(&self.reference_accuracies)
            );
        }
        let _ = writeln!(out, "Abs. {:.2}", 100.0 * self.absolute_accuracy);
        match self.relative_accuracy {
            Some(r) => {
                let _ = writeln!(out, "Rel. {:.2}", 100.0 * r);
            }
            None => {
                let _ = writeln!(out, "Rel. -");
            }
        }
        out
    }
}
