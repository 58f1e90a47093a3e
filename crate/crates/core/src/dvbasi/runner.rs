use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use super::report::{EpochRecord, IterationRecord, MetricSense, RunReport};
use super::{RunConfig, CONTROL_FLOOR, IMPROVEMENT_TOL};
use crate::error::{Error, Result};
use crate::objectives::{combined_direction, mgda_weights, negation_loss, LossKind, ObjectiveKind};
use crate::paramspace::{self, norm, BlockVector, Checkpoint};
use crate::refnet::{accuracy, mean_entropy, Classifier, TaskData};
use crate::scaling::{apply, lambda_gradient, OptimizerState, ScalingMatrix};
use crate::vectors::{difference_vector, random_unit_matched};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Tying {
    /// One λ per block.
    PerBlock,
    /// A single λ shared by every block.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Difference,
    /// Matched-norm random direction, redrawn once per outer iteration.
    Random,
}

/// Anisotropic iterations along the difference vector.
pub fn dvbasi_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    theta0: &Checkpoint,
    data: &[TaskData],
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    run_loop(model, pre, theta0, data, cfg, Tying::PerBlock, Direction::Difference)
}

/// Same loop with one scalar shared by all blocks: `θ_{j+1} = θ_j + α_j δ_j`.
pub fn isotropic_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    theta0: &Checkpoint,
    data: &[TaskData],
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    run_loop(model, pre, theta0, data, cfg, Tying::Shared, Direction::Difference)
}

/// Anisotropic iterations along a random direction with the norm of `δ_j`,
/// seeded with `cfg.seed ^ j`.
pub fn random_perturbation_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    theta0: &Checkpoint,
    data: &[TaskData],
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    run_loop(model, pre, theta0, data, cfg, Tying::PerBlock, Direction::Random)
}

fn find_task<'a>(data: &'a [TaskData], id: &str) -> Result<&'a TaskData> {
    data.iter()
        .find(|t| t.task_id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("task `{id}` is not in the data set")))
}

enum StepKind {
    Mean(LossKind),
    Mgda,
    /// Train tasks are `[target, control]`.
    Negation,
}

enum Metric<'a> {
    ValAccuracy(Vec<&'a TaskData>),
    ValEntropy(Vec<&'a TaskData>),
    Negation {
        target: &'a TaskData,
        control: &'a TaskData,
        floor: f64,
    },
}

struct Evaluation {
    value: f64,
    eligible: bool,
    control_accuracy: Option<f64>,
}

struct Plan<'a> {
    train: Vec<&'a TaskData>,
    step: StepKind,
    metric: Metric<'a>,
    report: Vec<&'a TaskData>,
}

impl<'a> Plan<'a> {
    fn new<M: Classifier>(
        model: &M,
        pre: &Checkpoint,
        data: &'a [TaskData],
        objective: &ObjectiveKind,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no task data".into()));
        }
        let all: Vec<&TaskData> = data.iter().collect();
        Ok(match objective {
            ObjectiveKind::CrossEntropy => Self {
                train: all.clone(),
                step: StepKind::Mean(LossKind::CrossEntropy),
                metric: Metric::ValAccuracy(all.clone()),
                report: all,
            },
            ObjectiveKind::EntropyMin => Self {
                train: all.clone(),
                step: StepKind::Mean(LossKind::Entropy),
                metric: Metric::ValEntropy(all.clone()),
                report: all,
            },
            ObjectiveKind::Moo(ids) => {
                let tasks = ids
                    .iter()
                    .map(|id| find_task(data, id))
                    .collect::<Result<Vec<_>>>()?;
                Self {
                    train: tasks.clone(),
                    step: StepKind::Mgda,
                    metric: Metric::ValAccuracy(tasks.clone()),
                    report: tasks,
                }
            }
            ObjectiveKind::Negation { target, control } => {
                let t = find_task(data, target)?;
                let c = find_task(data, control)?;
                let floor = CONTROL_FLOOR * accuracy(model, pre, &c.val)?;
                Self {
                    train: vec![t, c],
                    step: StepKind::Negation,
                    metric: Metric::Negation {
                        target: t,
                        control: c,
                        floor,
                    },
                    report: vec![t, c],
                }
            }
        })
    }

    fn sense(&self) -> MetricSense {
        match self.metric {
            Metric::ValAccuracy(_) => MetricSense::Max,
            Metric::ValEntropy(_) | Metric::Negation { .. } => MetricSense::Min,
        }
    }

    fn metric_name(&self) -> &'static str {
        match self.metric {
            Metric::ValAccuracy(_) => "mean_val_accuracy",
            Metric::ValEntropy(_) => "mean_val_entropy",
            Metric::Negation { .. } => "target_val_accuracy",
        }
    }

    fn evaluate<M: Classifier>(&self, model: &M, w: &Checkpoint, pool: Option<&ThreadPool>) -> Result<Evaluation> {
        let mean_over = |tasks: &[&TaskData], f: &(dyn Fn(&TaskData) -> Result<f64> + Sync)| -> Result<f64> {
            let vals = map_tasks(pool, tasks.len(), |i| f(tasks[i]))?;
            Ok(vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Ok(match &self.metric {
            Metric::ValAccuracy(tasks) => Evaluation {
                value: mean_over(tasks, &|t| accuracy(model, w, &t.val))?,
                eligible: true,
                control_accuracy: None,
            },
            Metric::ValEntropy(tasks) => Evaluation {
                value: mean_over(tasks, &|t| mean_entropy(model, w, &t.val))?,
                eligible: true,
                control_accuracy: None,
            },
            Metric::Negation {
                target,
                control,
                floor,
            } => {
                let c = accuracy(model, w, &control.val)?;
                Evaluation {
                    value: accuracy(model, w, &target.val)?,
                    eligible: c >= *floor,
                    control_accuracy: Some(c),
                }
            }
        })
    }

    fn loss_and_grad<M: Classifier>(
        &self,
        model: &M,
        w: &Checkpoint,
        batches: &[Vec<usize>],
        pool: Option<&ThreadPool>,
    ) -> Result<(f64, BlockVector)> {
        let loss_kind = match self.step {
            StepKind::Mean(k) => k,
            StepKind::Mgda | StepKind::Negation => LossKind::CrossEntropy,
        };
        let per_task = map_tasks(pool, self.train.len(), |k| {
            let ds = &self.train[k].train;
            let idx = &batches[k];
            let xs: Vec<&[f64]> = idx.iter().map(|&i| ds.inputs[i].as_slice()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let labels = (loss_kind == LossKind::CrossEntropy).then_some(ys.as_slice());
            model.loss_and_grad(w, &xs, labels, loss_kind)
        })?;
        match self.step {
            StepKind::Mean(_) => {
                let k = per_task.len() as f64;
                let mut it = per_task.into_iter();
                let (mut loss, mut grad) = it.next().expect("at least one task");
                for (l, g) in it {
                    loss += l;
                    grad.axpy(1.0, &g)?;
                }
                Ok((loss / k, grad.map(|x| x / k)))
            }
            StepKind::Mgda => {
                let (losses, grads): (Vec<f64>, Vec<BlockVector>) = per_task.into_iter().unzip();
                let weights = mgda_weights(&grads)?;
                let loss = losses.iter().zip(weights.as_slice()).map(|(l, w)| l * w).sum();
                Ok((loss, combined_direction(&grads, &weights)?))
            }
            StepKind::Negation => {
                let mut it = per_task.into_iter();
                let (target_loss, target_grad) = it.next().expect("target");
                let (control_loss, control_grad) = it.next().expect("control");
                Ok((
                    negation_loss(target_loss, control_loss),
                    control_grad.minus(&target_grad)?,
                ))
            }
        }
    }
}

fn map_tasks<T, F>(pool: Option<&ThreadPool>, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    match pool {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

fn test_accuracies<M: Classifier>(model: &M, w: &Checkpoint, tasks: &[&TaskData]) -> Result<BTreeMap<String, f64>> {
    tasks
        .iter()
        .map(|t| Ok((t.task_id.clone(), accuracy(model, w, &t.test)?)))
        .collect()
}

fn scaling_from(names: &[String], coef: &[f64], tying: Tying) -> Result<ScalingMatrix> {
    ScalingMatrix::new(
        names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let v = match tying {
                    Tying::PerBlock => coef[i],
                    Tying::Shared => coef[0],
                };
                (n.clone(), v)
            })
            .collect(),
    )
}

pub(crate) fn base_assumptions(cfg: &RunConfig, direction: Direction) -> Vec<String> {
    let mut a = vec![
        "scaling optimizer: AdamW betas=(0.9,0.999) eps=1e-8 weight_decay=0".to_string(),
        format!("early stopping on the validation split, improvement tolerance {IMPROVEMENT_TOL}"),
        "epoch 0 of every iteration evaluates the unperturbed starting weights".to_string(),
        "lambda re-initialized to alpha0 at the start of every iteration".to_string(),
    ];
    match &cfg.objective {
        ObjectiveKind::EntropyMin => {
            a.push("unsupervised loss: mean softmax entropy over unlabeled train inputs".into());
            a.push("unsupervised model selection: mean validation entropy".into());
        }
        ObjectiveKind::Moo(_) => {
            a.push("mgda: closed form for two tasks, Frank-Wolfe with exact line search otherwise".into());
        }
        ObjectiveKind::Negation { .. } => {
            a.push(format!(
                "negation: control accuracy floor {CONTROL_FLOOR} x pre-trained enforced at selection time"
            ));
        }
        ObjectiveKind::CrossEntropy => {}
    }
    if direction == Direction::Random {
        a.push("random direction fixed per outer iteration, seed = run seed xor iteration index".into());
    }
    a
}

pub(crate) fn run_loop<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    theta0: &Checkpoint,
    data: &[TaskData],
    cfg: &RunConfig,
    tying: Tying,
    direction: Direction,
) -> Result<(Checkpoint, RunReport)> {
    cfg.validate()?;
    paramspace::subtract(theta0, pre)?;
    let plan = Plan::new(model, pre, data, &cfg.objective)?;
    let sense = plan.sense();
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let pool = pool.as_ref();

    let names: Vec<String> = theta0.blocks().iter().map(|b| b.name().to_string()).collect();
    let coef_names: Vec<&str> = match tying {
        Tying::PerBlock => names.iter().map(String::as_str).collect(),
        Tying::Shared => vec!["shared"],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = plan
        .train
        .iter()
        .map(|t| t.train.len().div_ceil(cfg.batch_size))
        .max()
        .unwrap_or(0);
    if steps == 0 {
        return Err(Error::InvalidArgument("training splits are empty".into()));
    }

    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(cfg.iterations);
    for m in 1..=cfg.iterations {
        let delta = difference_vector(&theta, pre)?;
        let delta_norms = norm(&delta);
        let dir = match direction {
            Direction::Difference => delta,
            Direction::Random => random_unit_matched(&delta, cfg.seed ^ (m as u64 - 1))?,
        };
        let mut coef = vec![cfg.alpha0; coef_names.len()];
        let mut opt = OptimizerState::with_learning_rate(coef.len(), cfg.learning_rate);

        let start = plan.evaluate(model, &theta, pool)?;
        let mut epochs = vec![EpochRecord {
            epoch: 0,
            metric: start.value,
            train_loss: None,
            eligible: start.eligible,
            control_accuracy: start.control_accuracy,
            lambdas: names.iter().map(|n| (n.clone(), 0.0)).collect(),
        }];
        let mut best = start.value;
        let mut best_epoch = 0;
        let mut best_theta = theta.clone();
        let mut stale = 0;
        let mut stopped_early = false;

        let mut orders: Vec<Vec<usize>> = plan.train.iter().map(|t| (0..t.train.len()).collect()).collect();
        for epoch in 1..=cfg.max_epochs {
            for o in orders.iter_mut() {
                o.shuffle(&mut rng);
            }
            let mut loss_sum = 0.0;
            for s in 0..steps {
                let batches: Vec<Vec<usize>> = orders
                    .iter()
                    .map(|o| {
                        let chunks = o.len().div_ceil(cfg.batch_size);
                        o.chunks(cfg.batch_size).nth(s % chunks).expect("in range").to_vec()
                    })
                    .collect();
                let lambda = scaling_from(&names, &coef, tying)?;
                let w = paramspace::add(&theta, &apply(&lambda, &dir)?)?;
                let (loss, grad) = plan.loss_and_grad(model, &w, &batches, pool)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at iteration {m}, epoch {epoch}"
                    )));
                }
                loss_sum += loss;
                let block_grads = lambda_gradient(&grad, &dir)?;
                let grads = match tying {
                    Tying::PerBlock => block_grads,
                    Tying::Shared => {
                        let mut it = block_grads.into_iter();
                        let first = it.next().expect("at least one block");
                        vec![it.fold(first, |a, b| a + b)]
                    }
                };
                opt.update(&mut coef, &grads, &coef_names)?;
            }
            let lambda = scaling_from(&names, &coef, tying)?;
            let candidate = paramspace::add(&theta, &apply(&lambda, &dir)?)?;
            let eval = plan.evaluate(model, &candidate, pool)?;
            if !eval.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "validation metric at iteration {m}, epoch {epoch}"
                )));
            }
            epochs.push(EpochRecord {
                epoch,
                metric: eval.value,
                train_loss: Some(loss_sum / steps as f64),
                eligible: eval.eligible,
                control_accuracy: eval.control_accuracy,
                lambdas: lambda.lambdas().to_vec(),
            });
            if eval.eligible && sense.improves(eval.value, best, IMPROVEMENT_TOL) {
                best = eval.value;
                best_epoch = epoch;
                best_theta = candidate;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        records.push(IterationRecord {
            iteration: m,
            delta_norm_per_block: delta_norms.per_block,
            delta_norm: delta_norms.global,
            epochs,
            best_epoch,
            best_metric: best,
            stopped_early,
        });
        theta = best_theta;
    }

    let mut report = RunReport {
        protocol: "dvbasi".into(),
        config: cfg.clone(),
        scaling: match tying {
            Tying::PerBlock => "anisotropic",
            Tying::Shared => "isotropic",
        }
        .into(),
        perturbation: match direction {
            Direction::Difference => "difference",
            Direction::Random => "random",
        }
        .into(),
        metric: plan.metric_name().into(),
        metric_sense: sense,
        iterations: records,
        initial_accuracies: test_accuracies(model, theta0, &plan.report)?,
        final_accuracies: test_accuracies(model, &theta, &plan.report)?,
        reference_accuracies: BTreeMap::new(),
        absolute_accuracy: 0.0,
        relative_accuracy: None,
        details: BTreeMap::new(),
        assumptions: base_assumptions(cfg, direction),
    };
    if let Metric::Negation { control, floor, .. } = &plan.metric {
        report.details.insert("control_floor".into(), floor.to_string());
        report.details.insert(
            "final_control_val_accuracy".into(),
            accuracy(model, &theta, &control.val)?.to_string(),
        );
    }
    report.refresh_summary();
    Ok((theta, report))
}
