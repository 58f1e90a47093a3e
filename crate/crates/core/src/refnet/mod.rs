//! Small reference classifiers, synthetic tasks and fine-tuning.

mod data;
mod mlp;
mod train;

pub use data::{make_task, make_task_in, Dataset, Split, TaskData, TaskKind, TaskSpace, TEST_SIZE, TRAIN_SIZE, VAL_SIZE};
pub use mlp::{Activation, Mlp, MlpSpec};
pub use train::{accuracy, fine_tune, mean_entropy, TrainHyper};

use crate::error::Result;
use crate::matrix::Matrix;
use crate::objectives::LossKind;
use crate::paramspace::{BlockVector, Checkpoint};

/// A model whose weights live in a [`Checkpoint`] and whose gradients come
/// back as a [`BlockVector`] of the same layout.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// One row of logits per input.
    fn logits<R: AsRef<[f64]>>(&self, w: &Checkpoint, inputs: &[R]) -> Result<Matrix>;

    /// Mean loss over the batch and its gradient with respect to `w`.
    fn loss_and_grad<R: AsRef<[f64]>>(
        &self,
        w: &Checkpoint,
        inputs: &[R],
        labels: Option<&[usize]>,
        loss: LossKind,
    ) -> Result<(f64, BlockVector)>;
}
