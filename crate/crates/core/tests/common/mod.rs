#![allow(dead_code)]

use dvmerge::matrix::Matrix;
use dvmerge::objectives::{loss_and_logit_grad, LossKind};
use dvmerge::paramspace::{Block, BlockShape, BlockVector, Checkpoint};
use dvmerge::refnet::{fine_tune, make_task, Classifier, Mlp, MlpSpec, TaskData, TaskKind, TrainHyper};
use dvmerge::Result;

pub struct Toy {
    pub mlp: Mlp,
    pub pre: Checkpoint,
    pub data: Vec<TaskData>,
    pub fine_tuned: Vec<Checkpoint>,
}

pub const FOUR: [TaskKind; 4] = [TaskKind::Moons, TaskKind::Blobs, TaskKind::Rings, TaskKind::XorGrid];

/// Default network, one fine-tune per task, all seeded from `seed`.
pub fn toy(kinds: &[TaskKind], seed: u64) -> Toy {
    let mlp = Mlp::new(MlpSpec::default_for(2).unwrap());
    let pre = mlp.init_weights(seed);
    let data: Vec<TaskData> = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| make_task(k, seed * 100 + i as u64).unwrap())
        .collect();
    let fine_tuned = data
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let hyper = TrainHyper { seed: seed * 100 + 50 + i as u64, ..TrainHyper::default() };
            fine_tune(&mlp, &pre, &t.train, &hyper).unwrap().0
        })
        .collect();
    Toy { mlp, pre, data, fine_tuned }
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Bias-free linear classifier with a single weight block, so block-wise
/// and shared scaling coincide.
pub struct Linear {
    pub inputs: usize,
    pub classes: usize,
    pub poison: bool,
}

impl Linear {
    pub fn new(inputs: usize, classes: usize) -> Self {
        Self { inputs, classes, poison: false }
    }

    pub fn weights(&self, values: Vec<f64>) -> Checkpoint {
        let shape = BlockShape::new("w", vec![self.classes, self.inputs]).unwrap();
        Checkpoint::new(vec![Block::new(shape, values).unwrap()]).unwrap()
    }
}

impl Classifier for Linear {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits<R: AsRef<[f64]>>(&self, w: &Checkpoint, inputs: &[R]) -> Result<Matrix> {
        let wv = w.blocks()[0].values();
        let mut out = Matrix::zeros(inputs.len(), self.classes);
        for (r, x) in inputs.iter().enumerate() {
            let x = x.as_ref();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = wv[c * self.inputs..(c + 1) * self.inputs].iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    fn loss_and_grad<R: AsRef<[f64]>>(
        &self,
        w: &Checkpoint,
        inputs: &[R],
        labels: Option<&[usize]>,
        loss: LossKind,
    ) -> Result<(f64, BlockVector)> {
        let logits = self.logits(w, inputs)?;
        let (l, g) = loss_and_logit_grad(&logits, labels, loss)?;
        let mut grad = vec![0.0; self.classes * self.inputs];
        for (r, x) in inputs.iter().enumerate() {
            for c in 0..self.classes {
                for (k, xv) in x.as_ref().iter().enumerate() {
                    grad[c * self.inputs + k] += g.row(r)[c] * xv;
                }
            }
        }
        let shape = w.blocks()[0].shape().clone();
        let l = if self.poison { f64::NAN } else { l };
        Ok((l, BlockVector::new(vec![Block::new(shape, grad)?])?))
    }
}
