//! The iterative merge driver and the experiment protocols built on it.
//!
//! Each outer iteration recomputes the difference vector `δ = θ - θ_pre`
//! from the current best weights, learns a fresh block scaling `Λ` for it
//! with early stopping on a validation metric, and moves to the best
//! candidate `θ + Λ δ` seen in that iteration (including `θ` itself).

mod protocols;
mod report;
mod runner;

pub use protocols::{
    addition_run, isotropic_addition_run, merge_initial, negation_run, random_addition_run,
    single_task_boost, tta_run, tta_sources, ALPHA_GRID,
};
pub use report::{EpochRecord, IterationRecord, MetricSense, RunReport};
pub use runner::{dvbasi_run, isotropic_run, random_perturbation_run};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;

/// Minimum change in the validation metric that counts as an improvement.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

/// Fraction of the pre-trained control accuracy a negated model must keep.
pub const CONTROL_FLOOR: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Outer iterations `M`.
    pub iterations: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Initial value of every λ at the start of each iteration.
    pub alpha0: f64,
    pub objective: ObjectiveKind,
    pub seed: u64,
    pub batch_size: usize,
    /// AdamW learning rate for the scaling coefficients.
    pub learning_rate: f64,
    /// Worker threads for per-task gradient evaluation. Results are reduced
    /// in task order regardless of this value.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            max_epochs: 60,
            patience: 5,
            alpha0: 0.3,
            objective: ObjectiveKind::CrossEntropy,
            seed: 0,
            batch_size: 32,
            learning_rate: 0.01,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad("patience must be in 1..=max_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if !self.alpha0.is_finite() {
            return bad("alpha0 must be finite");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        self.objective.validate()
    }
}
