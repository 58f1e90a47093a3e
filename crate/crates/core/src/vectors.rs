//! Task vectors, difference vectors and the perturbations built from them.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::paramspace::{self, BlockVector, Checkpoint};

/// Weight snapshots recorded during one training run, `steps[0]` being the
/// starting weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorHistory {
    steps: Vec<Checkpoint>,
}

const HISTORY_INDEX: &str = "index.txt";

impl VectorHistory {
    pub fn new(steps: Vec<Checkpoint>) -> Result<Self> {
        if let Some(first) = steps.first() {
            for s in &steps[1..] {
                paramspace::subtract(s, first)?;
            }
        }
        Ok(Self { steps })
    }

    pub(crate) fn push(&mut self, c: Checkpoint) {
        self.steps.push(c);
    }

    pub fn steps(&self) -> &[Checkpoint] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Writes `step_00000.ckpt`, `step_00001.ckpt`, ... and an index file
    /// listing them in step order.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (k, step) in self.steps.iter().enumerate() {
            let name = format!("step_{k:05}.ckpt");
            step.save(dir.join(&name))?;
            index.push_str(&name);
            index.push('\n');
        }
        fs::write(dir.join(HISTORY_INDEX), index)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = fs::read_to_string(dir.join(HISTORY_INDEX))?;
        let steps = index
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Checkpoint::load(dir.join(l.trim())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }
}

/// `ft - pre`.
pub fn task_vector(ft: &Checkpoint, pre: &Checkpoint) -> Result<BlockVector> {
    paramspace::subtract(ft, pre)
}

/// `current - pre` for any training state, not only a fine-tuned endpoint.
pub fn difference_vector(current: &Checkpoint, pre: &Checkpoint) -> Result<BlockVector> {
    paramspace::subtract(current, pre)
}

pub fn negate(v: &BlockVector) -> BlockVector {
    v.map(|x| -x)
}

/// Elementwise sum in list order.
pub fn sum_vectors(vs: &[BlockVector]) -> Result<BlockVector> {
    let (first, rest) = vs
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("cannot sum an empty vector list".into()))?;
    let mut acc = first.clone();
    for v in rest {
        acc.axpy(1.0, v)?;
    }
    Ok(acc)
}

pub fn cosine(a: &BlockVector, b: &BlockVector) -> Result<f64> {
    let na = paramspace::norm(a).global;
    let nb = paramspace::norm(b).global;
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok(a.dot(b)? / (na * nb))
}

/// An isotropic random direction rescaled to the global norm of `template`.
///
/// Coordinates are standard normal draws from a ChaCha8 stream seeded with
/// `seed`, taken in block order.
pub fn random_unit_matched(template: &BlockVector, seed: u64) -> Result<BlockVector> {
    let target = paramspace::norm(template).global;
    if target == 0.0 {
        return Err(Error::Degenerate(
            "random perturbation needs a nonzero template vector".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = template.zeros_like();
    for block in out.blocks_mut() {
        for v in block.values_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    let drawn = paramspace::norm(&out).global;
    let scale = target / drawn;
    Ok(out.map(|x| x * scale))
}

/// Norm of `δ(last) - Σ_k (θ^(k) - θ^(k-1)) - δ(first)`, which is zero up to
/// rounding for any history.
pub fn telescoping_residual(h: &VectorHistory, pre: &Checkpoint) -> Result<f64> {
    let first = h
        .steps
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty history".into()))?;
    let last = h.steps.last().expect("non-empty");
    let mut residual = difference_vector(last, pre)?;
    residual.axpy(-1.0, &difference_vector(first, pre)?)?;
    for pair in h.steps.windows(2) {
        residual.axpy(-1.0, &paramspace::subtract(&pair[1], &pair[0])?)?;
    }
    Ok(paramspace::norm(&residual).global)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramspace::testutil::{ckpt, vector};
    use crate::paramspace::{add, norm};
    use rand::Rng;

    #[test]
    fn task_vector_roundtrip_and_zero() {
        let pre = ckpt(&[("w", &[0.25, -1.0]), ("b", &[2.0])]);
        let ft = ckpt(&[("w", &[1.0, -0.5]), ("b", &[1.5])]);
        assert!(task_vector(&pre, &pre).unwrap().is_zero());
        let tau = task_vector(&ft, &pre).unwrap();
        assert_eq!(add(&pre, &tau).unwrap(), ft);
    }

    #[test]
    fn difference_after_single_add() {
        let pre = ckpt(&[("w", &[0.5, 1.0])]);
        let v = vector(&[("w", &[0.25, -0.75])]);
        let cur = add(&pre, &v).unwrap();
        assert_eq!(difference_vector(&cur, &pre).unwrap(), v);
    }

    #[test]
    fn negation_cases() {
        let v = vector(&[("w", &[1.0, -3.0]), ("b", &[0.5])]);
        assert_eq!(negate(&negate(&v)), v);
        assert!(negate(&v.zeros_like()).is_zero());
        assert_eq!(norm(&negate(&v)), norm(&v));
    }

    #[test]
    fn sum_cases() {
        let v = vector(&[("w", &[1.0, -3.0]), ("b", &[0.5])]);
        assert!(sum_vectors(&[v.clone(), negate(&v)]).unwrap().is_zero());
        assert_eq!(sum_vectors(std::slice::from_ref(&v)).unwrap(), v);
        assert!(sum_vectors(&[]).is_err());
        let w = vector(&[("w", &[1.0])]);
        assert!(sum_vectors(&[v, w]).is_err());
    }

    #[test]
    fn sum_is_commutative_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let vs: Vec<BlockVector> = (0..3)
                .map(|_| {
                    let a: Vec<f64> = (0..7).map(|_| rng.random_range(-10.0..10.0)).collect();
                    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
                    vector(&[("w", &a), ("b", &b)])
                })
                .collect();
            let s = sum_vectors(&vs).unwrap();
            let p = sum_vectors(&[vs[2].clone(), vs[0].clone(), vs[1].clone()]).unwrap();
            let diff = norm(&s.minus(&p).unwrap()).global;
            assert!(diff <= 1e-12 * norm(&s).global.max(1.0));
        }
    }

    #[test]
    fn random_matched_norm_and_determinism() {
        let t = vector(&[("w", &[3.0, 4.0, 0.0]), ("b", &[12.0])]);
        let r1 = random_unit_matched(&t, 42).unwrap();
        let r2 = random_unit_matched(&t, 42).unwrap();
        assert_eq!(r1, r2);
        assert_ne!(r1, random_unit_matched(&t, 43).unwrap());
        assert!((norm(&r1).global - 13.0).abs() <= 1e-10 * 13.0);
        assert!(matches!(
            random_unit_matched(&t.zeros_like(), 1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn random_direction_nearly_orthogonal_in_high_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = vector(&[("w", &a), ("b", &b)]);
        let mean: f64 = (0..100u64)
            .map(|s| cosine(&random_unit_matched(&t, s).unwrap(), &t).unwrap().abs())
            .sum::<f64>()
            / 100.0;
        assert!(mean < 0.1, "mean |cos| = {mean}");
    }

    #[test]
    fn telescoping_cases() {
        let pre = ckpt(&[("w", &[0.1, 0.2])]);
        let single = VectorHistory::new(vec![pre.clone()]).unwrap();
        assert_eq!(telescoping_residual(&single, &pre).unwrap(), 0.0);
        assert!(telescoping_residual(&VectorHistory::default(), &pre).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut steps = vec![pre.clone()];
        for _ in 0..5 {
            let step = vector(&[("w", &[rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)])]);
            steps.push(add(steps.last().unwrap(), &step).unwrap());
        }
        let h = VectorHistory::new(steps.clone()).unwrap();
        let delta = difference_vector(steps.last().unwrap(), &pre).unwrap();
        // Independent route: sum the recorded increments directly.
        let incs: Vec<BlockVector> = steps
            .windows(2)
            .map(|p| paramspace::subtract(&p[1], &p[0]).unwrap())
            .collect();
        let summed = sum_vectors(&incs).unwrap();
        let gap = norm(&summed.minus(&delta).unwrap()).global;
        assert!(gap <= 1e-9 * norm(&delta).global);
        assert!(telescoping_residual(&h, &pre).unwrap() <= 1e-9 * norm(&delta).global);
    }

    #[test]
    fn history_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let h = VectorHistory::new(vec![
            ckpt(&[("w", &[0.0, 1.0])]),
            ckpt(&[("w", &[0.5, 1.5])]),
        ])
        .unwrap();
        h.save_dir(dir.path()).unwrap();
        assert_eq!(VectorHistory::load_dir(dir.path()).unwrap(), h);
    }
}
