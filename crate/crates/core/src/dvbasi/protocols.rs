use std::collections::BTreeMap;

use super::report::RunReport;
use super::runner::{run_loop, Direction, Tying};
use super::{RunConfig, CONTROL_FLOOR};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;
use crate::paramspace::{self, scale_uniform, BlockVector, Checkpoint};
use crate::refnet::{accuracy, Classifier, Dataset, TaskData};
use crate::vectors::{sum_vectors, task_vector};

/// Candidate scalings for the initial merge, ascending.
pub const ALPHA_GRID: [f64; 20] = [
    0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85,
    0.9, 0.95, 1.0,
];

fn mean_accuracy<M: Classifier>(model: &M, w: &Checkpoint, sets: &[&Dataset]) -> Result<f64> {
    let mut s = 0.0;
    for d in sets {
        s += accuracy(model, w, d)?;
    }
    Ok(s / sets.len() as f64)
}

fn test_accuracies<M: Classifier>(
    model: &M,
    ws: &[(&str, &Checkpoint)],
    data: &[TaskData],
) -> Result<BTreeMap<String, f64>> {
    ws.iter()
        .map(|(id, w)| {
            let t = data
                .iter()
                .find(|t| t.task_id == *id)
                .ok_or_else(|| Error::InvalidArgument(format!("task `{id}` is not in the data set")))?;
            Ok((id.to_string(), accuracy(model, w, &t.test)?))
        })
        .collect()
}

/// Task arithmetic `pre + α Σ τ_i`, with `α` from [`ALPHA_GRID`] maximizing
/// mean accuracy on `val`. Ties keep the smaller `α`.
pub fn merge_initial<M: Classifier>(
    model: &M,
    task_vectors: &[BlockVector],
    pre: &Checkpoint,
    val: &[&Dataset],
) -> Result<(Checkpoint, f64)> {
    if task_vectors.is_empty() {
        return Err(Error::InvalidArgument("no task vectors to merge".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("no validation sets for alpha selection".into()));
    }
    let sum = sum_vectors(task_vectors)?;
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    for &alpha in &ALPHA_GRID {
        let w = paramspace::add(pre, &scale_uniform(&sum, alpha))?;
        let acc = mean_accuracy(model, &w, val)?;
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, alpha, w));
        }
    }
    let (_, alpha, w) = best.expect("grid is non-empty");
    Ok((w, alpha))
}

fn addition_with<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    fine_tuned: &[Checkpoint],
    data: &[TaskData],
    cfg: &RunConfig,
    tying: Tying,
    direction: Direction,
    protocol: &str,
) -> Result<(Checkpoint, RunReport)> {
    if fine_tuned.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fine-tuned checkpoints for {} tasks",
            fine_tuned.len(),
            data.len()
        )));
    }
    let taus = fine_tuned
        .iter()
        .map(|ft| task_vector(ft, pre))
        .collect::<Result<Vec<_>>>()?;
    let vals: Vec<&Dataset> = data.iter().map(|t| &t.val).collect();
    let (theta0, alpha) = merge_initial(model, &taus, pre, &vals)?;
    let (w, mut report) = run_loop(model, pre, &theta0, data, cfg, tying, direction)?;
    report.protocol = protocol.into();
    report.details.insert("initial_alpha".into(), alpha.to_string());
    let refs: Vec<(&str, &Checkpoint)> = data.iter().map(|t| t.task_id.as_str()).zip(fine_tuned).collect();
    report.set_reference(test_accuracies(model, &refs, data)?);
    Ok((w, report))
}

/// Task addition: merge the fine-tuned models into `θ₀`, then refine it with
/// anisotropic difference-vector iterations. Relative accuracy is measured
/// against each task's own fine-tuned model.
///
/// `fine_tuned[i]` belongs to `data[i]`.
pub fn addition_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    fine_tuned: &[Checkpoint],
    data: &[TaskData],
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    addition_with(model, pre, fine_tuned, data, cfg, Tying::PerBlock, Direction::Difference, "addition")
}

/// [`addition_run`] with a single shared scaling coefficient.
pub fn isotropic_addition_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    fine_tuned: &[Checkpoint],
    data: &[TaskData],
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    addition_with(model, pre, fine_tuned, data, cfg, Tying::Shared, Direction::Difference, "baseline-iso")
}

/// [`addition_run`] with the difference vector replaced by a random
/// direction of the same norm.
pub fn random_addition_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    fine_tuned: &[Checkpoint],
    data: &[TaskData],
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    addition_with(model, pre, fine_tuned, data, cfg, Tying::PerBlock, Direction::Random, "baseline-random")
}

/// Task negation. `θ₀ = pre - α τ_target` with `α` chosen to minimize target
/// validation accuracy among the values that keep control validation
/// accuracy at or above `0.95 ×` the pre-trained one; the iterations then
/// minimize `CE_control - CE_target` under the same floor.
pub fn negation_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    tau_target: &BlockVector,
    target: &TaskData,
    control: &TaskData,
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    if target.task_id == control.task_id {
        return Err(Error::InvalidArgument(format!(
            "target and control are both `{}`",
            target.task_id
        )));
    }
    let floor = CONTROL_FLOOR * accuracy(model, pre, &control.val)?;
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    let mut best_control = f64::NEG_INFINITY;
    for &alpha in &ALPHA_GRID {
        let w = paramspace::add(pre, &scale_uniform(tau_target, -alpha))?;
        let c = accuracy(model, &w, &control.val)?;
        best_control = best_control.max(c);
        if c < floor {
            continue;
        }
        let t = accuracy(model, &w, &target.val)?;
        if best.as_ref().is_none_or(|(b, _, _)| t < *b) {
            best = Some((t, alpha, w));
        }
    }
    let Some((_, alpha, theta0)) = best else {
        return Err(Error::NoFeasibleAlpha {
            floor,
            best: best_control,
        });
    };
    let cfg = RunConfig {
        objective: ObjectiveKind::Negation {
            target: target.task_id.clone(),
            control: control.task_id.clone(),
        },
        ..cfg.clone()
    };
    let data = [target.clone(), control.clone()];
    let (w, mut report) = run_loop(model, pre, &theta0, &data, &cfg, Tying::PerBlock, Direction::Difference)?;
    report.protocol = "negation".into();
    report.details.insert("initial_alpha".into(), alpha.to_string());
    let refs = [
        (target.task_id.as_str(), pre),
        (control.task_id.as_str(), pre),
    ];
    report.set_reference(test_accuracies(model, &refs, &data)?);
    Ok((w, report))
}

/// The vectors a test-time adaptation run may compose: every vector except
/// the target's, in id order.
pub fn tta_sources<'a>(
    all_vectors: &'a BTreeMap<String, BlockVector>,
    target_id: &str,
) -> Result<Vec<(&'a str, &'a BlockVector)>> {
    if !all_vectors.contains_key(target_id) {
        return Err(Error::InvalidArgument(format!(
            "no task vector for target `{target_id}`"
        )));
    }
    if all_vectors.len() < 2 {
        return Err(Error::InvalidArgument(
            "test-time adaptation needs at least one vector besides the target".into(),
        ));
    }
    Ok(all_vectors
        .iter()
        .filter(|(id, _)| id.as_str() != target_id)
        .map(|(id, v)| (id.as_str(), v))
        .collect())
}

/// Test-time adaptation to `target_id` without its own task vector.
///
/// `θ₀` merges the remaining vectors with `α` picked on the source tasks'
/// validation splits, then the iterations minimize prediction entropy on the
/// target's unlabeled train inputs. The reference is the pre-trained model.
pub fn tta_run<M: Classifier>(
    model: &M,
    pre: &Checkpoint,
    all_vectors: &BTreeMap<String, BlockVector>,
    target_id: &str,
    data: &[TaskData],
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    let sources = tta_sources(all_vectors, target_id)?;
    let find = |id: &str| {
        data.iter()
            .find(|t| t.task_id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("task `{id}` is not in the data set")))
    };
    let target = find(target_id)?;
    let vals = sources
        .iter()
        .map(|(id, _)| find(id).map(|t| &t.val))
        .collect::<Result<Vec<_>>>()?;
    let vectors: Vec<BlockVector> = sources.iter().map(|(_, v)| (*v).clone()).collect();
    let (theta0, alpha) = merge_initial(model, &vectors, pre, &vals)?;
    let cfg = RunConfig {
        objective: ObjectiveKind::EntropyMin,
        ..cfg.clone()
    };
    let only = std::slice::from_ref(target);
    let (w, mut report) = run_loop(model, pre, &theta0, only, &cfg, Tying::PerBlock, Direction::Difference)?;
    report.protocol = "tta".into();
    report.details.insert("initial_alpha".into(), alpha.to_string());
    report.details.insert(
        "composed_tasks".into(),
        sources.iter().map(|(id, _)| *id).collect::<Vec<_>>().join(","),
    );
    report.details.insert("target_task".into(), target_id.into());
    report.set_reference(test_accuracies(model, &[(target_id, pre)], only)?);
    Ok((w, report))
}

/// Refines a single fine-tuned model with its own supervised objective,
/// starting the iterations at `θ₀ = ft`. The reference is `ft` itself, so
/// relative accuracy above 1 means the boost helped.
pub fn single_task_boost<M: Classifier>(
    model: &M,
    ft: &Checkpoint,
    pre: &Checkpoint,
    data: &TaskData,
    cfg: &RunConfig,
) -> Result<(Checkpoint, RunReport)> {
    let cfg = RunConfig {
        objective: ObjectiveKind::CrossEntropy,
        ..cfg.clone()
    };
    let only = std::slice::from_ref(data);
    let (w, mut report) = run_loop(model, pre, ft, only, &cfg, Tying::PerBlock, Direction::Difference)?;
    report.protocol = "boost".into();
    report.set_reference(test_accuracies(model, &[(data.task_id.as_str(), ft)], only)?);
    Ok((w, report))
}
