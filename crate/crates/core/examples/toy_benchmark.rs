//! Four-task toy addition benchmark: θ₀, isotropic, anisotropic and random
//! perturbation, averaged over a few seeds.
//!
//! cargo run --release -p dvmerge --example toy_benchmark -- [seeds] [iterations]
//!
//! `OBJECTIVE` (default `entropy_min`) and `ALPHA0` (default 0.3) override
//! the run settings.

use std::time::Instant;

use dvmerge::dvbasi::{addition_run, isotropic_addition_run, random_addition_run, RunConfig};
use dvmerge::refnet::{accuracy, fine_tune, make_task, Mlp, MlpSpec, TaskKind, TrainHyper};

fn main() -> dvmerge::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(3);
    let iterations = args.get(1).copied().unwrap_or(4) as usize;
    let objective: dvmerge::objectives::ObjectiveKind = std::env::var("OBJECTIVE").unwrap_or_else(|_| "entropy_min".into()).parse()?;
    let alpha0 = std::env::var("ALPHA0").ok().and_then(|v| v.parse().ok()).unwrap_or(0.3);
    let kinds = [TaskKind::Moons, TaskKind::Blobs, TaskKind::Rings, TaskKind::XorGrid];
    let mlp = Mlp::new(MlpSpec::default_for(2)?);
    let mut totals = [0.0; 4];
    for seed in 0..seeds {
        let started = Instant::now();
        let data = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| make_task(k, seed * 100 + i as u64))
            .collect::<dvmerge::Result<Vec<_>>>()?;
        let pre = mlp.init_weights(seed);
        let mut fts = Vec::new();
        for (i, t) in data.iter().enumerate() {
            let hyper = TrainHyper { seed: seed * 100 + 50 + i as u64, ..TrainHyper::default() };
            let (ft, _) = fine_tune(&mlp, &pre, &t.train, &hyper)?;
            print!("{} ft={:.3} ", t.task_id, accuracy(&mlp, &ft, &t.test)?);
            fts.push(ft);
        }
        println!();
        let cfg = RunConfig { iterations, seed, objective: objective.clone(), alpha0, ..RunConfig::default() };
        let (_, a) = addition_run(&mlp, &pre, &fts, &data, &cfg)?;
        let (_, iso) = isotropic_addition_run(&mlp, &pre, &fts, &data, &cfg)?;
        let (_, r) = random_addition_run(&mlp, &pre, &fts, &data, &cfg)?;
        let row = [a.initial_mean_accuracy(), iso.absolute_accuracy, a.absolute_accuracy, r.absolute_accuracy];
        println!(
            "seed {seed}: theta0 {:.4} iso {:.4} aniso {:.4} random {:.4} ({:.1}s)",
            row[0],
            row[1],
            row[2],
            row[3],
            started.elapsed().as_secs_f64()
        );
        for (t, v) in totals.iter_mut().zip(row) {
            *t += v / seeds as f64;
        }
    }
    println!(
        "mean: theta0 {:.4} iso {:.4} aniso {:.4} random {:.4}",
        totals[0], totals[1], totals[2], totals[3]
    );
    Ok(())
}
