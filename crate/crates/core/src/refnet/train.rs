use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Dataset};
use crate::error::{Error, Result};
use crate::objectives::{row_entropies, LossKind};
use crate::paramspace::Checkpoint;
use crate::vectors::VectorHistory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Keep a snapshot after every optimizer step.
    pub record_history: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 0,
            record_history: false,
        }
    }
}

/// Plain minibatch SGD on cross-entropy, starting from `pre`.
///
/// Each epoch visits the samples in a fresh permutation drawn from a ChaCha8
/// stream seeded with `hyper.seed`, so the run is bit-reproducible.
pub fn fine_tune<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    data: &Dataset,
    hyper: &TrainHyper,
) -> Result<(Checkpoint, Option<VectorHistory>)> {
    if hyper.batch_size == 0 || !(hyper.learning_rate > 0.0 && hyper.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    if data.is_empty() && hyper.epochs > 0 {
        return Err(Error::InvalidArgument(format!("no samples in `{}`", data.task_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut w = pre.clone();
    let mut history = hyper.record_history.then(|| {
        let mut h = VectorHistory::default();
        h.push(pre.clone());
        h
    });
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| data.inputs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (loss, grad) = model.loss_and_grad(&w, &xs, Some(&ys), LossKind::CrossEntropy)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "fine-tuning loss on `{}` at epoch {epoch}",
                    data.task_id
                )));
            }
            for (b, g) in w.blocks_mut().iter_mut().zip(grad.blocks()) {
                for (p, &d) in b.values_mut().iter_mut().zip(g.values()) {
                    *p -= hyper.learning_rate * d;
                }
            }
            if let Some(h) = history.as_mut() {
                h.push(w.clone());
            }
        }
    }
    Ok((w, history))
}

/// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
pub fn accuracy<M: Classifier>(model: &M, w: &Checkpoint, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty {} split for `{}`",
            data.split, data.task_id
        )));
    }
    let logits = model.logits(w, &data.inputs)?;
    let correct = logits
        .iter_rows()
        .zip(&data.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean softmax entropy of the model's predictions on `data`.
pub fn mean_entropy<M: Classifier>(model: &M, w: &Checkpoint, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty {} split for `{}`",
            data.split, data.task_id
        )));
    }
    let h = row_entropies(&model.logits(w, &data.inputs)?);
    Ok(h.iter().sum::<f64>() / h.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
