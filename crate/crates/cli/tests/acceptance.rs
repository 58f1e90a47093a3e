//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line;
//! the test fails at the end if any criterion failed.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines
//! on success.

use std::fs;
use std::time::{Duration, Instant};

use dvmerge::dvbasi::{
    addition_run, isotropic_addition_run, negation_run, random_addition_run, RunConfig, RunReport,
    IMPROVEMENT_TOL,
};
use dvmerge::matrix::Matrix;
use dvmerge::objectives::{combined_direction, cross_entropy, entropy_min, mgda_weights, LossKind, ObjectiveKind, SimplexWeights};
use dvmerge::paramspace::{add, norm, subtract, Block, BlockShape, BlockVector, Checkpoint};
use dvmerge::refnet::{accuracy, fine_tune, make_task, Activation, Classifier, Mlp, MlpSpec, TaskData, TaskKind, TrainHyper};
use dvmerge::scaling::{apply, lambda_gradient, ScalingMatrix};
use dvmerge::vectors::{task_vector, telescoping_residual};
use dvmerge_cli::commands;
use dvmerge_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const FOUR: [TaskKind; 4] = [TaskKind::Moons, TaskKind::Blobs, TaskKind::Rings, TaskKind::XorGrid];

struct Outcome {
    ok: bool,
    detail: String,
}

impl Outcome {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self { ok, detail: detail.into() }
    }

    fn within(self, started: Instant, limit: Duration) -> Self {
        let took = started.elapsed();
        let ok = self.ok && took < limit;
        Self::new(ok, format!("{} [{:.1}s, limit {}s]", self.detail, took.as_secs_f64(), limit.as_secs()))
    }
}

struct Toy {
    mlp: Mlp,
    pre: Checkpoint,
    data: Vec<TaskData>,
    fine_tuned: Vec<Checkpoint>,
}

fn toy(kinds: &[TaskKind], seed: u64) -> Toy {
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

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn perturbed(w: &Checkpoint, rng: &mut ChaCha8Rng, scale: f64) -> Checkpoint {
    let blocks = w
        .blocks()
        .iter()
        .map(|b| {
            let v = b.values().iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect();
            Block::new(b.shape().clone(), v).unwrap()
        })
        .collect();
    Checkpoint::new(blocks).unwrap()
}

fn with_value(w: &Checkpoint, block: usize, idx: usize, value: f64) -> Checkpoint {
    let blocks = w
        .blocks()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut v = b.values().to_vec();
            if i == block {
                v[idx] = value;
            }
            Block::new(b.shape().clone(), v).unwrap()
        })
        .collect();
    Checkpoint::new(blocks).unwrap()
}

fn inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

fn gradients() -> Outcome {
    let mut worst_backward: f64 = 0.0;
    let mut ok = true;
    for (dims, seed) in [(vec![2, 2], 1), (vec![2, 4, 3], 2), (vec![3, 3, 3, 2], 3)] {
        let mlp = Mlp::new(MlpSpec::new(dims, Activation::Tanh).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = perturbed(&mlp.init_weights(seed), &mut rng, 0.3);
        ok &= w.num_params() <= 50;
        let xs = inputs(&mut rng, 7, mlp.spec().input_dim());
        let ys: Vec<usize> = (0..7).map(|i| i % mlp.num_classes()).collect();
        for kind in [LossKind::CrossEntropy, LossKind::Entropy] {
            let labels = (kind == LossKind::CrossEntropy).then_some(ys.as_slice());
            let (_, g) = mlp.loss_and_grad(&w, &xs, labels, kind).unwrap();
            let h = 1e-5;
            for (bi, b) in w.blocks().iter().enumerate() {
                for (k, &v) in b.values().iter().enumerate() {
                    let lp = mlp.loss_and_grad(&with_value(&w, bi, k, v + h), &xs, labels, kind).unwrap().0;
                    let lm = mlp.loss_and_grad(&with_value(&w, bi, k, v - h), &xs, labels, kind).unwrap().0;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = g.blocks()[bi].values()[k];
                    let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-3);
                    worst_backward = worst_backward.max(rel);
                    ok &= (an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()) + 1e-9;
                }
            }
        }
    }

    let mlp = Mlp::new(MlpSpec::new(vec![3, 6, 6, 2], Activation::Tanh).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pre = mlp.init_weights(9);
    ok &= pre.num_params() <= 200;
    let theta = perturbed(&pre, &mut rng, 0.2);
    let delta = subtract(&perturbed(&theta, &mut rng, 0.5), &pre).unwrap();
    let names: Vec<String> = pre.blocks().iter().map(|b| b.name().to_string()).collect();
    let lambdas: Vec<f64> = names.iter().map(|_| rng.random_range(-0.5..0.8)).collect();
    let xs = inputs(&mut rng, 9, 3);
    let ys: Vec<usize> = (0..9).map(|i| (i * 7) % 2).collect();
    let scaling = |l: &[f64]| ScalingMatrix::new(names.iter().cloned().zip(l.iter().copied()).collect()).unwrap();
    let mut worst_lambda: f64 = 0.0;
    for kind in [LossKind::CrossEntropy, LossKind::Entropy] {
        let labels = (kind == LossKind::CrossEntropy).then_some(ys.as_slice());
        let loss = |l: &[f64]| {
            let w = add(&theta, &apply(&scaling(l), &delta).unwrap()).unwrap();
            mlp.loss_and_grad(&w, &xs, labels, kind).unwrap()
        };
        let analytic = lambda_gradient(&loss(&lambdas).1, &delta).unwrap();
        let h = 1e-5;
        for i in 0..lambdas.len() {
            let (mut up, mut dn) = (lambdas.clone(), lambdas.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (loss(&up).0 - loss(&dn).0) / (2.0 * h);
            let scale = analytic[i].abs().max(fd.abs());
            worst_lambda = worst_lambda.max((analytic[i] - fd).abs() / scale.max(1e-12));
            ok &= (analytic[i] - fd).abs() <= 1e-4 * scale + 1e-9;
        }
    }
    Outcome::new(ok, format!("worst relative error: backward {worst_backward:.1e}, lambda {worst_lambda:.1e}"))
}

fn telescoping() -> Outcome {
    let mlp = Mlp::new(MlpSpec::default_for(2).unwrap());
    let pre = mlp.init_weights(21);
    let task = make_task(TaskKind::Moons, 21).unwrap();
    let hyper = TrainHyper {
        epochs: 6,
        batch_size: task.train.len() / 10,
        seed: 21,
        record_history: true,
        ..TrainHyper::default()
    };
    let (ft, h) = fine_tune(&mlp, &pre, &task.train, &hyper).unwrap();
    let h = h.unwrap();
    let steps = h.len() - 1;
    let delta = norm(&subtract(&ft, &pre).unwrap()).global;
    let residual = telescoping_residual(&h, &pre).unwrap();
    Outcome::new(
        steps == 60 && residual <= 1e-9 * delta,
        format!("{steps} steps, residual {residual:.1e}, bound {:.1e}", 1e-9 * delta),
    )
}

struct Ordering {
    theta0: Vec<f64>,
    iso: Vec<f64>,
    aniso: Vec<f64>,
    random: Vec<f64>,
}

fn ordering(fixtures: &[Toy], monotone: &mut Vec<(String, bool)>) -> Outcome {
    let cfg = RunConfig { objective: ObjectiveKind::EntropyMin, ..RunConfig::default() };
    let mut o = Ordering { theta0: vec![], iso: vec![], aniso: vec![], random: vec![] };
    for (seed, t) in SEEDS.iter().zip(fixtures) {
        let cfg = RunConfig { seed: *seed, ..cfg.clone() };
        let (_, a) = addition_run(&t.mlp, &t.pre, &t.fine_tuned, &t.data, &cfg).unwrap();
        let (_, i) = isotropic_addition_run(&t.mlp, &t.pre, &t.fine_tuned, &t.data, &cfg).unwrap();
        let (_, r) = random_addition_run(&t.mlp, &t.pre, &t.fine_tuned, &t.data, &cfg).unwrap();
        o.theta0.push(a.initial_mean_accuracy());
        o.aniso.push(a.absolute_accuracy);
        o.iso.push(i.absolute_accuracy);
        o.random.push(r.absolute_accuracy);
        for rep in [&a, &i, &r] {
            monotone.push((format!("{} seed {seed}", rep.protocol), rep.best_metrics_monotone()));
        }
    }
    let (t0, iso, an, rnd) = (mean(&o.theta0), mean(&o.iso), mean(&o.aniso), mean(&o.random));
    let checks = [an > iso, iso >= t0, rnd <= t0 - 0.10];
    Outcome::new(
        checks.iter().all(|&c| c),
        format!(
            "entropy_min, mean test accuracy: theta0 {:.2}, isotropic {:.2}, anisotropic {:.2}, random {:.2} \
             (aniso>iso {}, iso>=theta0 {}, random<=theta0-10 {})",
            100.0 * t0,
            100.0 * iso,
            100.0 * an,
            100.0 * rnd,
            checks[0],
            checks[1],
            checks[2]
        ),
    )
}

fn improvement(fixtures: &[Toy], monotone: &mut Vec<(String, bool)>, started: Instant) -> (Outcome, Vec<f64>) {
    let t = &fixtures[0];
    let (_, r) = addition_run(&t.mlp, &t.pre, &t.fine_tuned, &t.data, &RunConfig::default()).unwrap();
    monotone.push(("addition cross_entropy seed 0".into(), r.best_metrics_monotone()));
    let best = r.best_metrics();
    let improves = best[1..].iter().any(|&b| b > best[0] + IMPROVEMENT_TOL);
    let broken: Vec<&str> = monotone.iter().filter(|(_, m)| !m).map(|(n, _)| n.as_str()).collect();
    let detail = format!(
        "{} runs monotone{}; cross_entropy best val accuracy per iteration {:?}",
        monotone.len() - broken.len(),
        if broken.is_empty() { String::new() } else { format!(", not monotone: {broken:?}") },
        best.iter().map(|b| (b * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    let out = Outcome::new(broken.is_empty() && improves, detail).within(started, Duration::from_secs(180));
    (out, best)
}

fn negation() -> Outcome {
    let mut floors_held = 0;
    let mut forgotten = 0;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let t = toy(&[TaskKind::Blobs, TaskKind::Moons], seed);
        let tau = task_vector(&t.fine_tuned[0], &t.pre).unwrap();
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let (w, _) = negation_run(&t.mlp, &t.pre, &tau, &t.data[0], &t.data[1], &cfg).unwrap();
        let pre_control = accuracy(&t.mlp, &t.pre, &t.data[1].val).unwrap();
        let control = accuracy(&t.mlp, &w, &t.data[1].val).unwrap();
        let pre_target = accuracy(&t.mlp, &t.pre, &t.data[0].test).unwrap();
        let target = accuracy(&t.mlp, &w, &t.data[0].test).unwrap();
        floors_held += usize::from(control >= 0.95 * pre_control);
        forgotten += usize::from(target <= 0.5 * pre_target);
        lines.push(format!("target {:.1}/{:.1} control {:.1}/{:.1}", 100.0 * target, 100.0 * pre_target, 100.0 * control, 100.0 * pre_control));
    }
    let n = SEEDS.len();
    Outcome::new(
        floors_held == n && forgotten == n,
        format!("floor held {floors_held}/{n}, target halved {forgotten}/{n} (final/pre: {})", lines.join("; ")),
    )
}

fn grad(rng: &mut ChaCha8Rng, dim: usize) -> BlockVector {
    let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    BlockVector::new(vec![
        Block::new(BlockShape::new("w", vec![dim]).unwrap(), a).unwrap(),
        Block::new(BlockShape::new("b", vec![3]).unwrap(), b).unwrap(),
    ])
    .unwrap()
}

fn quad(gs: &[BlockVector], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            s += w[i] * w[j] * gs[i].dot(&gs[j]).unwrap();
        }
    }
    s
}

fn mgda() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut weight_err, mut norm_ok, mut fw_err): (f64, usize, f64) = (0.0, 0, 0.0);
    for _ in 0..20 {
        let gs = [grad(&mut rng, 6), grad(&mut rng, 6)];
        let best = (0..=1000)
            .map(|k| k as f64 / 1000.0)
            .min_by(|a, b| quad(&gs, &[*a, 1.0 - a]).total_cmp(&quad(&gs, &[*b, 1.0 - b])))
            .unwrap();
        let w = mgda_weights(&gs).unwrap();
        weight_err = weight_err.max((w.as_slice()[0] - best).abs());
        let c = norm(&combined_direction(&gs, &w).unwrap()).global;
        let smallest = gs.iter().map(|g| norm(g).global).fold(f64::INFINITY, f64::min);
        norm_ok += usize::from(c <= smallest + 1e-12);
    }
    let steps = 100;
    for _ in 0..5 {
        let gs: Vec<BlockVector> = (0..4).map(|_| grad(&mut rng, 3)).collect();
        let mut best = (f64::INFINITY, vec![]);
        for a in 0..=steps {
            for b in 0..=steps - a {
                for c in 0..=steps - a - b {
                    let w: Vec<f64> = [a, b, c, steps - a - b - c].iter().map(|&k| k as f64 / steps as f64).collect();
                    let v = quad(&gs, &w);
                    if v < best.0 {
                        best = (v, w);
                    }
                }
            }
        }
        let w = mgda_weights(&gs).unwrap();
        let fw = norm(&combined_direction(&gs, &w).unwrap()).global;
        let grid = norm(&combined_direction(&gs, &SimplexWeights::new(best.1).unwrap()).unwrap()).global;
        fw_err = fw_err.max((fw - grid).abs());
    }
    Outcome::new(
        weight_err <= 1e-3 && norm_ok == 20 && fw_err <= 1e-2,
        format!("pair weight error {weight_err:.1e}, norm bound {norm_ok}/20, four-task norm gap {fw_err:.1e}"),
    )
}

fn identities() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut shift: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for c in [2usize, 3, 5, 10] {
        let ln_c = (c as f64).ln();
        for v in [0.0, 3.7, -120.0] {
            let m = Matrix::from_vec(4, c, vec![v; 4 * c]).unwrap();
            worst = worst.max((cross_entropy(&m, &[0, 1 % c, c - 1, 0]).unwrap() - ln_c).abs());
            worst = worst.max((entropy_min(&m).unwrap() - ln_c).abs());
        }
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let labels: Vec<usize> = (0..6).map(|i| i % c).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        for s in [-50.0, 1e-3, 7.5, 300.0] {
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x + s).collect()).collect();
            let ms = Matrix::from_rows(&shifted).unwrap();
            shift = shift.max((cross_entropy(&m, &labels).unwrap() - cross_entropy(&ms, &labels).unwrap()).abs());
            shift = shift.max((entropy_min(&m).unwrap() - entropy_min(&ms).unwrap()).abs());
        }
    }
    Outcome::new(
        worst <= 1e-12 && shift <= 1e-10,
        format!("uniform-logit error {worst:.1e}, shift error {shift:.1e}"),
    )
}

fn alpha_insensitivity(fixtures: &[Toy]) -> Outcome {
    let mut finals = Vec::new();
    for alpha0 in [0.1, 0.5, 1.0] {
        let accs: Vec<f64> = SEEDS
            .iter()
            .zip(fixtures)
            .map(|(&seed, t)| {
                let cfg = RunConfig { alpha0, seed, ..RunConfig::default() };
                addition_run(&t.mlp, &t.pre, &t.fine_tuned, &t.data, &cfg).unwrap().1.absolute_accuracy
            })
            .collect();
        finals.push(100.0 * mean(&accs));
    }
    let spread = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - finals.iter().cloned().fold(f64::INFINITY, f64::min);
    Outcome::new(
        spread < 2.0,
        format!("mean final accuracy for alpha0 0.1/0.5/1.0: {:.2}/{:.2}/{:.2}, spread {spread:.2} points", finals[0], finals[1], finals[2]),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/four_task.conf")).unwrap();
    let mut cfg = ExperimentConfig::parse(&text, "four_task.conf").unwrap();
    cfg.output_dir = dir.path().join("out");
    commands::finetune(&cfg, &mut std::io::sink()).unwrap();
    let mut reports = Vec::new();
    for threads in [1, 1, 4] {
        let paths = commands::run(&cfg, commands::Protocol::Addition, threads, &mut std::io::sink()).unwrap();
        reports.push(fs::read(&paths[0]).unwrap());
    }
    let same = reports[0] == reports[1];
    let parse = |b: &[u8]| RunReport::from_json(std::str::from_utf8(b).unwrap()).unwrap();
    let (one, mut four) = (parse(&reports[0]), parse(&reports[2]));
    four.config.threads = one.config.threads;
    let threaded = one == four;
    Outcome::new(
        same && threaded,
        format!("{} report bytes, repeat identical {same}, 4 threads equal apart from the thread count {threaded}", reports[0].len()),
    )
}

fn roundtrip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let t = toy(&[TaskKind::Moons], 7);
    let ckpt = t.fine_tuned[0].clone().with_meta("task", "moons");
    let vector = task_vector(&t.fine_tuned[0], &t.pre).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    let ckpt_ok = fs::read(&a).unwrap() == fs::read(&b).unwrap() && loaded == ckpt;
    let (c, d) = (dir.path().join("a.vec"), dir.path().join("b.vec"));
    vector.save(&c).unwrap();
    let loaded = BlockVector::load(&c).unwrap();
    loaded.save(&d).unwrap();
    let vec_ok = fs::read(&c).unwrap() == fs::read(&d).unwrap() && loaded == vector;
    Outcome::new(ckpt_ok && vec_ok, format!("checkpoint identical {ckpt_ok}, block vector identical {vec_ok}"))
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    let t = Instant::now();
    results.push((1, "gradient correctness", gradients().within(t, Duration::from_secs(10))));
    let t = Instant::now();
    results.push((2, "telescoping", telescoping().within(t, Duration::from_secs(5))));

    let t = Instant::now();
    let fixtures: Vec<Toy> = SEEDS.iter().map(|&s| toy(&FOUR, s)).collect();
    let mut monotone = Vec::new();
    results.push((3, "perturbation and scaling ordering", ordering(&fixtures, &mut monotone).within(t, Duration::from_secs(180))));
    let (out, _) = improvement(&fixtures, &mut monotone, t);
    results.push((4, "iterative improvement", out));

    let t = Instant::now();
    results.push((5, "negation", negation().within(t, Duration::from_secs(60))));
    let t = Instant::now();
    results.push((6, "mgda", mgda().within(t, Duration::from_secs(10))));
    results.push((7, "objective identities", identities()));
    results.push((8, "initial alpha insensitivity", alpha_insensitivity(&fixtures)));
    results.push((9, "determinism", determinism()));
    results.push((10, "format round trip", roundtrip()));

    for (n, name, o) in &results {
        println!("criterion {n:>2} {} {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.ok).map(|(n, _, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
