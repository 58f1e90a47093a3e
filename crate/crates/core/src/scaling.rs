//! Block-diagonal scaling of a difference vector and the optimizer that
//! learns it.
//!
//! With `θ = θ_j + Λ δ` and `Λ = diag(λ_1 I_1, ..., λ_n I_n)`, the chain rule
//! gives `∂L/∂λ_i = ⟨∇_{θ_i} L, δ_i⟩`: one inner product per block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paramspace::{check_compatible, BlockVector, Checkpoint};

/// One coefficient per parameter block, in checkpoint block order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingMatrix {
    lambdas: Vec<(String, f64)>,
}

impl ScalingMatrix {
    pub fn new(lambdas: Vec<(String, f64)>) -> Result<Self> {
        if let Some((name, _)) = lambdas.iter().find(|(_, l)| !l.is_finite()) {
            return Err(Error::NonFinite(format!("scaling coefficient for `{name}`")));
        }
        Ok(Self { lambdas })
    }

    pub fn lambdas(&self) -> &[(String, f64)] {
        &self.lambdas
    }

    pub fn values(&self) -> Vec<f64> {
        self.lambdas.iter().map(|(_, l)| *l).collect()
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Same block names with every coefficient replaced by `value`.
    pub fn filled(&self, value: f64) -> Self {
        Self {
            lambdas: self.lambdas.iter().map(|(n, _)| (n.clone(), value)).collect(),
        }
    }

    fn check_covers(&self, v: &BlockVector) -> Result<()> {
        if self.lambdas.len() != v.blocks().len() {
            return Err(Error::BlockCount {
                expected: v.blocks().len(),
                found: self.lambdas.len(),
            });
        }
        for ((name, _), b) in self.lambdas.iter().zip(v.blocks()) {
            if name != b.name() {
                return Err(Error::ShapeMismatch {
                    block: b.name().to_string(),
                    detail: format!("scaling entry is named `{name}`"),
                });
            }
        }
        Ok(())
    }
}

/// Every λ set to `alpha0`.
pub fn init_scaling(template: &Checkpoint, alpha0: f64) -> Result<ScalingMatrix> {
    if !alpha0.is_finite() {
        return Err(Error::NonFinite("initial scaling coefficient".into()));
    }
    Ok(ScalingMatrix {
        lambdas: template
            .blocks()
            .iter()
            .map(|b| (b.name().to_string(), alpha0))
            .collect(),
    })
}

/// `(Λδ)_i = λ_i δ_i`.
pub fn apply(lambda: &ScalingMatrix, delta: &BlockVector) -> Result<BlockVector> {
    lambda.check_covers(delta)?;
    let mut out = delta.clone();
    for (b, (_, l)) in out.blocks_mut().iter_mut().zip(&lambda.lambdas) {
        for v in b.values_mut() {
            *v *= l;
        }
    }
    Ok(out)
}

/// `⟨∇_{θ_i} L, δ_i⟩` for every block `i`.
pub fn lambda_gradient(theta_grad: &BlockVector, delta: &BlockVector) -> Result<Vec<f64>> {
    check_compatible(theta_grad.blocks(), delta.blocks())?;
    theta_grad.block_dots(delta)
}

/// AdamW state for the scaling coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    /// Fresh moments for `n` coefficients with lr 0.01, betas (0.9, 0.999),
    /// epsilon 1e-8 and no decay.
    pub fn new(n: usize) -> Self {
        Self::with_learning_rate(n, 0.01)
    }

    pub fn with_learning_rate(n: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
            learning_rate,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Applies one bias-corrected AdamW update to `values`.
    pub fn update(&mut self, values: &mut [f64], grads: &[f64], names: &[&str]) -> Result<()> {
        if values.len() != grads.len() || values.len() != self.first_moment.len() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients, {} gradients, {} moment slots",
                values.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(Error::NonFinite(format!("scaling gradient for block `{name}`")));
        }
        self.step_count += 1;
        let (b1, b2) = self.betas;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (v, &g)) in values.iter_mut().zip(grads).enumerate() {
            if self.weight_decay != 0.0 {
                *v -= self.learning_rate * self.weight_decay * *v;
            }
            let m = b1 * self.first_moment[i] + (1.0 - b1) * g;
            let s = b2 * self.second_moment[i] + (1.0 - b2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = s;
            let m_hat = m / c1;
            let s_hat = s / c2;
            *v -= self.learning_rate * m_hat / (s_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// One AdamW step on every λ.
pub fn optimizer_step(
    mut state: OptimizerState,
    lambda: &ScalingMatrix,
    grads: &[f64],
) -> Result<(OptimizerState, ScalingMatrix)> {
    let mut values = lambda.values();
    let names: Vec<&str> = lambda.lambdas.iter().map(|(n, _)| n.as_str()).collect();
    state.update(&mut values, grads, &names)?;
    let lambdas = lambda
        .lambdas
        .iter()
        .zip(values)
        .map(|((n, _), v)| (n.clone(), v))
        .collect();
    Ok((state, ScalingMatrix { lambdas }))
}
