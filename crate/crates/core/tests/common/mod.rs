#![allow(dead_code)]

use dqp::diff::{DifferentiableSolution, ParamDirection};
use dqp::problem::QpProblem;
use dqp::sparse::CscMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn inf_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Active duals at least `gap` and inactive residuals at most `-gap`.
pub fn strictly_complementary(sol: &DifferentiableSolution, gap: f64) -> bool {
    let r = sol.problem().inequality_residuals(sol.z());
    (0..r.len()).all(|j| {
        if sol.active().contains(j) {
            sol.mu()[j] >= gap
        } else {
            r[j] <= -gap
        }
    })
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Same pattern as `m`, Gaussian values.
fn on_pattern(m: &CscMatrix, rng: &mut ChaCha8Rng) -> CscMatrix {
    m.with_values(normals(rng, m.nnz()))
}

/// A direction in every parameter block; `δP` is symmetric.
pub fn random_direction(problem: &QpProblem, seed: u64) -> ParamDirection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p, m) = problem.dims();
    let half = on_pattern(problem.p(), &mut rng);
    let dp = half.add(&half.transpose()).scaled(0.5);
    ParamDirection {
        dp: Some(dp),
        dq: Some(normals(&mut rng, n)),
        da: Some(on_pattern(problem.a(), &mut rng)),
        db: Some(normals(&mut rng, p)),
        dc: Some(on_pattern(problem.c(), &mut rng)),
        dd: Some(normals(&mut rng, m)),
    }
}

pub fn random_vector(n: usize, seed: u64) -> Vec<f64> {
    normals(&mut ChaCha8Rng::seed_from_u64(seed), n)
}
