//! Active-set identification from a primal point, optional greedy
//! refinement, and differentiability diagnostics.

use crate::kkt::{assemble_reduced_kkt, factorize, FactorMode};
use crate::problem::QpProblem;
use crate::solvers::PrimalDualPoint;

/// Default identification threshold.
pub const DEFAULT_EPS_ACTIVE: f64 = 1e-5;
/// Relative slack for "strictly smaller" in refinement.
const REFINE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    indices: Vec<usize>,
    eps: f64,
    residuals: Vec<f64>,
}

impl ActiveSet {
    /// Sorted indices `j` with `(Cz − d)_j ≥ −eps`.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `Cz − d` at the point the set was built from.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    fn with_indices(&self, indices: Vec<usize>) -> Self {
        Self {
            indices,
            eps: self.eps,
            residuals: self.residuals.clone(),
        }
    }
}

/// Thresholds the inequality residuals at `z`.
pub fn identify(problem: &QpProblem, z: &[f64], eps: f64) -> ActiveSet {
    assert_eq!(z.len(), problem.n(), "primal point has the wrong length");
    let residuals = problem.inequality_residuals(z);
    let indices = residuals
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= -eps)
        .map(|(j, _)| j)
        .collect();
    ActiveSet {
        indices,
        eps,
        residuals,
    }
}

/// `‖K_J (z, λ, μ_J) − (−q, b, d_J)‖₂` where `(λ, μ_J)` come from the
/// `K_J` solve and `z` is held at the given point. `None` when the
/// system could not be set up.
pub fn reduced_residual(problem: &QpProblem, z: &[f64], active: &[usize], regularization: f64) -> Option<f64> {
    let n = problem.n();
    let kkt = assemble_reduced_kkt(problem, active).ok()?;
    let k = kkt.matrix().clone();
    let fact = factorize(kkt, regularization);
    let mut rhs: Vec<f64> = problem.q().iter().map(|v| -v).collect();
    rhs.extend_from_slice(problem.b());
    rhs.extend(active.iter().map(|&j| problem.d()[j]));
    let mut sol = fact.solve(&rhs).ok()?;
    sol[..n].copy_from_slice(z);
    let kz = k.mul_vec(&sol);
    let norm = kz.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    norm.is_finite().then_some(norm)
}

/// Greedily adds inactive rows in order of increasing `|r_j|`, keeping
/// each one only while the reduced-system residual strictly decreases.
pub fn refine(problem: &QpProblem, z: &[f64], initial: &ActiveSet, regularization: f64) -> ActiveSet {
    let mut current: Vec<usize> = initial.indices.clone();
    let Some(mut best) = reduced_residual(problem, z, &current, regularization) else {
        return initial.clone();
    };
    let mut candidates: Vec<usize> = (0..problem.n_ineq()).filter(|j| !initial.contains(*j)).collect();
    candidates.sort_by(|&a, &b| {
        initial.residuals[a]
            .abs()
            .total_cmp(&initial.residuals[b].abs())
            .then(a.cmp(&b))
    });
    for j in candidates {
        let mut trial = current.clone();
        let pos = trial.binary_search(&j).unwrap_err();
        trial.insert(pos, j);
        match reduced_residual(problem, z, &trial, regularization) {
            Some(r) if r < best * (1.0 - REFINE_RTOL) => {
                best = r;
                current = trial;
            }
            _ => break,
        }
    }
    initial.with_indices(current)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiabilityDiagnosis {
    /// Rows with `|r_j| ≤ eps` and `μ_j ≤ eps`.
    pub weakly_active: Vec<usize>,
    /// `|J| + p ≤ n`.
    pub dimension_ok: bool,
    pub recommended_mode: FactorMode,
}

/// `point` must carry inequality duals when `m > 0`; missing duals are read
/// as zero.
pub fn diagnose(problem: &QpProblem, point: &PrimalDualPoint, active: &ActiveSet, eps: f64) -> DifferentiabilityDiagnosis {
    let mu = point.mu.clone().unwrap_or_else(|| vec![0.0; problem.n_ineq()]);
    let weakly_active: Vec<usize> = active
        .residuals
        .iter()
        .zip(&mu)
        .enumerate()
        .filter(|(_, (r, m))| r.abs() <= eps && **m <= eps)
        .map(|(j, _)| j)
        .collect();
    let dimension_ok = active.len() + problem.n_eq() <= problem.n();
    let recommended_mode = if dimension_ok && weakly_active.is_empty() {
        FactorMode::Direct
    } else {
        FactorMode::LeastSquares
    };
    DifferentiabilityDiagnosis {
        weakly_active,
        dimension_ok,
        recommended_mode,
    }
}
