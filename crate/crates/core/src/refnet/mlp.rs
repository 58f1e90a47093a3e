use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objectives::{loss_and_logit_grad, LossKind};
use crate::paramspace::{Block, BlockShape, BlockVector, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - a * a,
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tanh => "tanh",
            Self::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths `[input, hidden..., classes]` and the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_dims needs at least an input and an output width".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: {layer_dims:?}"
            )));
        }
        if *layer_dims.last().expect("len >= 2") < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(Self {
            layer_dims,
            activation,
        })
    }

    /// `[8, 32, 32, classes]` with tanh.
    pub fn default_for(classes: usize) -> Result<Self> {
        Self::new(vec![8, 32, 32, classes], Activation::Tanh)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().expect("len >= 2")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn block_shapes(&self) -> Vec<BlockShape> {
        let mut shapes = Vec::with_capacity(2 * self.num_layers());
        for (n, pair) in self.layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            shapes.push(BlockShape::new(format!("layer{n}.weight"), vec![fan_out, fan_in]).expect("positive"));
            shapes.push(BlockShape::new(format!("layer{n}.bias"), vec![fan_out]).expect("positive"));
        }
        shapes
    }
}

/// Fully connected classifier; the last layer emits raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init_weights(&self, seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = self
            .spec
            .block_shapes()
            .into_iter()
            .map(|shape| {
                if shape.dims().len() == 2 {
                    let scale = 1.0 / (shape.dims()[1] as f64).sqrt();
                    let values = (0..shape.numel())
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * scale
                        })
                        .collect();
                    Block::new(shape, values).expect("sized")
                } else {
                    Block::zeros(shape)
                }
            })
            .collect();
        Checkpoint::new(blocks)
            .expect("unique names")
            .with_meta("init_seed", seed.to_string())
            .with_meta(
                "layer_dims",
                self.spec
                    .layer_dims
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            )
            .with_meta("activation", self.spec.activation.to_string())
    }

    /// Checks that `w` has exactly this network's block layout.
    pub fn check_weights(&self, w: &Checkpoint) -> Result<()> {
        let expected = self.spec.block_shapes();
        if w.blocks().len() != expected.len() {
            return Err(Error::BlockCount {
                expected: expected.len(),
                found: w.blocks().len(),
            });
        }
        for (b, s) in w.blocks().iter().zip(&expected) {
            if b.shape() != s {
                return Err(Error::ShapeMismatch {
                    block: s.name().to_string(),
                    detail: format!("expected {:?} `{}`, found {:?} `{}`", s.dims(), s.name(), b.shape().dims(), b.name()),
                });
            }
        }
        Ok(())
    }

    fn check_inputs<R: AsRef<[f64]>>(&self, inputs: &[R]) -> Result<()> {
        let d = self.spec.input_dim();
        if let Some(i) = inputs.iter().position(|x| x.as_ref().len() != d) {
            return Err(Error::InvalidArgument(format!(
                "input row {i} has width {}, network expects {d}",
                inputs[i].as_ref().len()
            )));
        }
        Ok(())
    }

    /// Pre-activations and activations of every layer; the final entry of
    /// `acts` holds the logits.
    fn forward_trace<R: AsRef<[f64]>>(&self, w: &Checkpoint, inputs: &[R]) -> (Vec<Matrix>, Vec<Matrix>) {
        let n = inputs.len();
        let mut acts = Vec::with_capacity(self.spec.num_layers() + 1);
        let mut pre = Vec::with_capacity(self.spec.num_layers());
        let mut x = Matrix::zeros(n, self.spec.input_dim());
        for (r, row) in inputs.iter().enumerate() {
            x.row_mut(r).copy_from_slice(row.as_ref());
        }
        acts.push(x);
        let last = self.spec.num_layers() - 1;
        for l in 0..self.spec.num_layers() {
            let (fan_in, fan_out) = (self.spec.layer_dims[l], self.spec.layer_dims[l + 1]);
            let weight = w.blocks()[2 * l].values();
            let bias = w.blocks()[2 * l + 1].values();
            let mut z = Matrix::zeros(n, fan_out);
            let input = &acts[l];
            for r in 0..n {
                let xr = input.row(r);
                let zr = z.row_mut(r);
                for (o, zo) in zr.iter_mut().enumerate() {
                    let wr = &weight[o * fan_in..(o + 1) * fan_in];
                    *zo = bias[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let a = if l == last {
                z.clone()
            } else {
                let act = self.spec.activation;
                let data = z.as_slice().iter().map(|&v| act.apply(v)).collect();
                Matrix::from_vec(n, fan_out, data).expect("sized")
            };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }
}

impl Classifier for Mlp {
    fn num_classes(&self) -> usize {
        self.spec.classes()
    }

    fn logits<R: AsRef<[f64]>>(&self, w: &Checkpoint, inputs: &[R]) -> Result<Matrix> {
        self.check_weights(w)?;
        self.check_inputs(inputs)?;
        let (_, mut acts) = self.forward_trace(w, inputs);
        Ok(acts.pop().expect("at least one layer"))
    }

    fn loss_and_grad<R: AsRef<[f64]>>(
        &self,
        w: &Checkpoint,
        inputs: &[R],
        labels: Option<&[usize]>,
        loss: LossKind,
    ) -> Result<(f64, BlockVector)> {
        self.check_weights(w)?;
        self.check_inputs(inputs)?;
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = inputs.len();
        let (pre, acts) = self.forward_trace(w, inputs);
        let (value, mut dz) = loss_and_logit_grad(acts.last().expect("logits"), labels, loss)?;
        let mut grad = w.zeros_like();
        for l in (0..self.spec.num_layers()).rev() {
            let (fan_in, fan_out) = (self.spec.layer_dims[l], self.spec.layer_dims[l + 1]);
            {
                let blocks = grad.blocks_mut();
                let (wb, bb) = blocks[2 * l..2 * l + 2].split_at_mut(1);
                let gw = wb[0].values_mut();
                let gb = bb[0].values_mut();
                for r in 0..n {
                    let dzr = dz.row(r);
                    let xr = acts[l].row(r);
                    for (o, &d) in dzr.iter().enumerate() {
                        gb[o] += d;
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for (g, &x) in row.iter_mut().zip(xr) {
                            *g += d * x;
                        }
                    }
                }
            }
            if l > 0 {
                let weight = w.blocks()[2 * l].values();
                let act = self.spec.activation;
                let mut prev = Matrix::zeros(n, fan_in);
                for r in 0..n {
                    let dzr = dz.row(r);
                    let pr = prev.row_mut(r);
                    for (o, &d) in dzr.iter().enumerate().take(fan_out) {
                        let wr = &weight[o * fan_in..(o + 1) * fan_in];
                        for (p, &wv) in pr.iter_mut().zip(wr) {
                            *p += d * wv;
                        }
                    }
                    let zr = pre[l - 1].row(r);
                    let ar = acts[l].row(r);
                    for ((p, &z), &a) in pr.iter_mut().zip(zr).zip(ar) {
                        *p *= act.derivative(z, a);
                    }
                }
                dz = prev;
            }
        }
        Ok((value, grad))
    }
}
