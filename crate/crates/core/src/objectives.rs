//! Losses over logits and the MGDA min-norm gradient combiner.
//!
//! Both losses are evaluated through a max-shifted log-softmax, so adding a
//! constant to a row of logits leaves them unchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::paramspace::{norm, BlockVector};

/// Which objective an inner loop minimizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    CrossEntropy,
    EntropyMin,
    /// Descend on `control`, ascend on `target`.
    Negation { target: String, control: String },
    /// One cross-entropy objective per listed task, balanced with MGDA.
    Moo(Vec<String>),
}

impl ObjectiveKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Negation { target, control } if target == control => Err(Error::InvalidArgument(
                format!("negation needs distinct target and control, both are `{target}`"),
            )),
            Self::Moo(ids) if ids.len() < 2 => Err(Error::InvalidArgument(
                "moo objective needs at least two task ids".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_supervised(&self) -> bool {
        !matches!(self, Self::EntropyMin)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CrossEntropy => write!(f, "cross_entropy"),
            Self::EntropyMin => write!(f, "entropy_min"),
            Self::Negation { target, control } => write!(f, "negation:{target}:{control}"),
            Self::Moo(ids) => write!(f, "moo:{}", ids.join(",")),
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let kind = match s {
            "cross_entropy" => Self::CrossEntropy,
            "entropy_min" => Self::EntropyMin,
            _ => {
                if let Some(rest) = s.strip_prefix("negation:") {
                    let (target, control) = rest.split_once(':').ok_or_else(|| {
                        Error::InvalidArgument(format!("expected negation:<target>:<control>, got `{s}`"))
                    })?;
                    if target.is_empty() || control.is_empty() || control.contains(':') {
                        return Err(Error::InvalidArgument(format!(
                            "expected negation:<target>:<control>, got `{s}`"
                        )));
                    }
                    Self::Negation {
                        target: target.to_string(),
                        control: control.to_string(),
                    }
                } else if let Some(rest) = s.strip_prefix("moo:") {
                    let ids: Vec<String> = rest.split(',').map(|x| x.trim().to_string()).collect();
                    if ids.iter().any(String::is_empty) {
                        return Err(Error::InvalidArgument(format!("empty task id in `{s}`")));
                    }
                    Self::Moo(ids)
                } else {
                    return Err(Error::InvalidArgument(format!("unknown objective `{s}`")));
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Per-sample loss applied to a batch of logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Entropy,
}

fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(loss_and_logit_grad(logits, Some(labels), LossKind::CrossEntropy)?.0)
}

/// Mean Shannon entropy (nats) of the row-wise softmax.
pub fn entropy_min(logits: &Matrix) -> Result<f64> {
    Ok(loss_and_logit_grad(logits, None, LossKind::Entropy)?.0)
}

/// Per-row entropies, used for range checks.
pub fn row_entropies(logits: &Matrix) -> Vec<f64> {
    let mut logp = vec![0.0; logits.cols()];
    logits
        .iter_rows()
        .map(|row| {
            log_softmax(row, &mut logp);
            -logp.iter().map(|&l| l.exp() * l).sum::<f64>()
        })
        .collect()
}

/// Mean loss over rows and its gradient with respect to the logits.
pub fn loss_and_logit_grad(
    logits: &Matrix,
    labels: Option<&[usize]>,
    kind: LossKind,
) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(labels) = labels {
        check_labels(logits, labels)?;
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut logp = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for r in 0..n {
        log_softmax(logits.row(r), &mut logp);
        let g = grad.row_mut(r);
        match kind {
            LossKind::CrossEntropy => {
                let y = labels.ok_or_else(|| {
                    Error::InvalidArgument("cross-entropy needs labels".into())
                })?[r];
                total -= logp[y];
                for (k, gk) in g.iter_mut().enumerate() {
                    let p = logp[k].exp();
                    *gk = (p - if k == y { 1.0 } else { 0.0 }) * inv_n;
                }
            }
            LossKind::Entropy => {
                let h = -logp.iter().map(|&l| l.exp() * l).sum::<f64>();
                total += h;
                // dH/dz_k = -p_k (log p_k + H)
                for (gk, &l) in g.iter_mut().zip(&logp) {
                    *gk = -l.exp() * (l + h) * inv_n;
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Composite for forgetting a target task while keeping a control task.
pub fn negation_loss(target_loss: f64, control_loss: f64) -> f64 {
    control_loss - target_loss
}

/// Convex combination weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "weights {weights:?} are not on the simplex"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

const FW_MAX_ITERS: usize = 250;
const FW_TOL: f64 = 1e-8;

/// Simplex weights minimizing `‖Σ w_i g_i‖²`.
///
/// Two gradients use the closed-form minimizer on the segment; more use
/// Frank-Wolfe with away steps and exact line search, starting from uniform weights.
pub fn mgda_weights(grads: &[BlockVector]) -> Result<SimplexWeights> {
    let n = grads.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "MGDA needs at least two gradients, got {n}"
        )));
    }
    if let Some(i) = grads.iter().position(BlockVector::is_zero) {
        return Err(Error::Degenerate(format!("gradient {i} is all zero")));
    }
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let d = grads[i].dot(&grads[j])?;
            gram[i][j] = d;
            gram[j][i] = d;
        }
    }
    if n == 2 {
        let denom = gram[0][0] + gram[1][1] - 2.0 * gram[0][1];
        if denom <= 1e-14 * (gram[0][0] + gram[1][1]) {
            return Ok(SimplexWeights::uniform(2));
        }
        let gamma = ((gram[1][1] - gram[0][1]) / denom).clamp(0.0, 1.0);
        return Ok(SimplexWeights(vec![gamma, 1.0 - gamma]));
    }
    Ok(SimplexWeights(frank_wolfe(&gram)))
}

fn frank_wolfe(gram: &[Vec<f64>]) -> Vec<f64> {
    let n = gram.len();
    let mut w = vec![1.0 / n as f64; n];
    for _ in 0..FW_MAX_ITERS {
        // gw = G w, half the gradient of w'Gw
        let gw: Vec<f64> = gram
            .iter()
            .map(|row| row.iter().zip(&w).map(|(g, x)| g * x).sum())
            .collect();
        let wgw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        let mut t = 0;
        let mut a = None;
        for i in 0..n {
            if gw[i] < gw[t] {
                t = i;
            }
            if w[i] > 0.0 && a.is_none_or(|k: usize| gw[i] > gw[k]) {
                a = Some(i);
            }
        }
        let a = a.expect("weights stay on the simplex");
        let fw_gap = wgw - gw[t];
        let away_gap = gw[a] - wgw;
        if fw_gap.max(away_gap) <= FW_TOL * wgw.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        // Move along d = e_t - w (toward t) or d = w - e_a (away from a),
        // with the exact minimizer of the quadratic along d.
        let (slope, curv, max_step, toward) = if fw_gap >= away_gap {
            (gw[t] - wgw, wgw - 2.0 * gw[t] + gram[t][t], 1.0, true)
        } else {
            let wa = w[a];
            let max_step = if wa < 1.0 { wa / (1.0 - wa) } else { f64::INFINITY };
            (wgw - gw[a], wgw - 2.0 * gw[a] + gram[a][a], max_step, false)
        };
        if curv <= 0.0 {
            break;
        }
        let gamma = (-slope / curv).clamp(0.0, max_step);
        if toward {
            for (i, x) in w.iter_mut().enumerate() {
                *x *= 1.0 - gamma;
                if i == t {
                    *x += gamma;
                }
            }
        } else {
            for (i, x) in w.iter_mut().enumerate() {
                *x *= 1.0 + gamma;
                if i == a {
                    *x -= gamma;
                }
            }
            if gamma == max_step {
                w[a] = 0.0;
            }
        }
    }
    w
}

/// `Σ w_i g_i`.
pub fn combined_direction(grads: &[BlockVector], w: &SimplexWeights) -> Result<BlockVector> {
    if grads.len() != w.0.len() || grads.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients but {} weights",
            grads.len(),
            w.0.len()
        )));
    }
    let mut acc = grads[0].map(|x| w.0[0] * x);
    for (g, &c) in grads.iter().zip(&w.0).skip(1) {
        acc.axpy(c, g)?;
    }
    Ok(acc)
}

/// Global norm of the MGDA combination, handy for diagnostics.
pub fn min_norm(grads: &[BlockVector]) -> Result<f64> {
    let w = mgda_weights(grads)?;
    Ok(norm(&combined_direction(grads, &w)?).global)
}
