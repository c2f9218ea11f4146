//! Optimality measures for a primal-dual point.

use crate::problem::{dot, QpProblem};
use crate::solvers::PrimalDualPoint;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `max(‖Az − b‖∞, [Cz − d]₊)`
    pub r_p: f64,
    /// `‖Pz + q + Aᵀλ + Cᵀμ‖∞`
    pub r_d: f64,
    /// `|zᵀPz + qᵀz + bᵀλ + dᵀμ|`
    pub r_g: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn primal_residual(problem: &QpProblem, z: &[f64]) -> f64 {
    let eq = inf_norm(&problem.equality_residuals(z));
    let ineq = problem
        .inequality_residuals(z)
        .into_iter()
        .fold(0.0f64, f64::max);
    eq.max(ineq)
}

/// Stationarity vector `Pz + q + Aᵀλ + Cᵀμ`.
pub fn stationarity(problem: &QpProblem, z: &[f64], lambda: &[f64], mu: &[f64]) -> Vec<f64> {
    let mut g = problem.p().mul_vec(z);
    for (gi, qi) in g.iter_mut().zip(problem.q()) {
        *gi += qi;
    }
    for (gi, v) in g.iter_mut().zip(problem.a().tmul_vec(lambda)) {
        *gi += v;
    }
    for (gi, v) in g.iter_mut().zip(problem.c().tmul_vec(mu)) {
        *gi += v;
    }
    g
}

pub fn dual_residual(problem: &QpProblem, z: &[f64], lambda: &[f64], mu: &[f64]) -> f64 {
    inf_norm(&stationarity(problem, z, lambda, mu))
}

pub fn duality_gap(problem: &QpProblem, z: &[f64], lambda: &[f64], mu: &[f64]) -> f64 {
    let pz = problem.p().mul_vec(z);
    (dot(z, &pz) + dot(problem.q(), z) + dot(problem.b(), lambda) + dot(problem.d(), mu)).abs()
}

pub fn residuals_of(problem: &QpProblem, z: &[f64], lambda: &[f64], mu: &[f64]) -> Residuals {
    Residuals {
        r_p: primal_residual(problem, z),
        r_d: dual_residual(problem, z, lambda, mu),
        r_g: duality_gap(problem, z, lambda, mu),
    }
}

/// `None` when the point lacks duals that the problem needs.
pub fn residuals(problem: &QpProblem, point: &PrimalDualPoint) -> Option<Residuals> {
    let lambda = match (&point.lambda, problem.n_eq()) {
        (Some(l), _) => l.clone(),
        (None, 0) => Vec::new(),
        (None, _) => return None,
    };
    let mu = match (&point.mu, problem.n_ineq()) {
        (Some(m), _) => m.clone(),
        (None, 0) => Vec::new(),
        (None, _) => return None,
    };
    Some(residuals_of(problem, &point.z, &lambda, &mu))
}
