//! Operator-splitting solver in the OSQP style.
//!
//! All constraints are stacked as `l ≤ Mx ≤ u` with `M = [A; C]`,
//! `l = [b; −∞]`, `u = [b; d]`. The quasi-definite matrix
//! `[[P + σI, Mᵀ], [M, −ρ⁻¹]]` is factorized once per solve. Equality rows
//! use a penalty `ρ_eq = 1000ρ`.

use std::time::Instant;

use super::{Capabilities, PrimalDualPoint, SolveSettings, SolveStatus, SolverBackend, SolverError};
use crate::kkt::{assemble_reduced_kkt, factorize_uncounted, FactorMode};
use crate::linalg::{minimum_degree, LdlFactor};
use crate::metrics::{dual_residual, primal_residual};
use crate::problem::QpProblem;
use crate::sparse::CscMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub rho_eq_scale: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Re-solve the reduced KKT system on the detected active set after
    /// convergence and keep the result if it is at least as accurate.
    pub polish: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            rho_eq_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            polish: true,
        }
    }
}

impl AdmmSettings {
    pub fn without_polish() -> Self {
        Self {
            polish: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdmmSolver {
    pub settings: AdmmSettings,
}

impl AdmmSolver {
    pub fn new(settings: AdmmSettings) -> Self {
        Self { settings }
    }
}

impl SolverBackend for AdmmSolver {
    fn name(&self) -> &str {
        "admm"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            returns_duals: true,
            supports_sparse: true,
            supports_warm_start: true,
        }
    }

    fn solve(&self, problem: &QpProblem, settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError> {
        solve_admm_with(problem, settings, &self.settings)
    }
}

/// ADMM with the default parameters.
pub fn solve_admm(problem: &QpProblem, settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError> {
    solve_admm_with(problem, settings, &AdmmSettings::default())
}

fn stacked(problem: &QpProblem) -> CscMatrix {
    let (n, p, _) = problem.dims();
    let mut trip: Vec<(usize, usize, f64)> = problem.a().iter().collect();
    trip.extend(problem.c().iter().map(|(i, j, v)| (p + i, j, v)));
    CscMatrix::from_triplets(p + problem.n_ineq(), n, &trip).expect("stacked rows are disjoint")
}

pub fn solve_admm_with(
    problem: &QpProblem,
    settings: &SolveSettings,
    admm: &AdmmSettings,
) -> Result<PrimalDualPoint, SolverError> {
    settings.check()?;
    if !(admm.rho > 0.0 && admm.sigma > 0.0 && admm.alpha > 0.0 && admm.alpha < 2.0) {
        return Err(SolverError::InvalidSettings("ADMM needs rho, sigma > 0 and alpha in (0, 2)".into()));
    }
    let deadline = settings.time_limit.map(|t| Instant::now() + t);
    let (n, p, m) = problem.dims();
    let rows = p + m;
    let mat = stacked(problem);
    let rho: Vec<f64> = (0..rows)
        .map(|i| if i < p { admm.rho * admm.rho_eq_scale } else { admm.rho })
        .collect();
    let upper: Vec<f64> = problem.b().iter().chain(problem.d()).copied().collect();
    let project = |i: usize, v: f64| if i < p { upper[i] } else { v.min(upper[i]) };

    // Quasi-definite system, both triangles.
    let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(problem.p().nnz() + n + 2 * mat.nnz() + rows);
    let mut has_diag = vec![false; n];
    for (i, j, v) in problem.p().iter() {
        if i == j {
            has_diag[i] = true;
            trip.push((i, j, v + admm.sigma));
        } else {
            trip.push((i, j, v));
        }
    }
    for (i, present) in has_diag.iter().enumerate() {
        if !present {
            trip.push((i, i, admm.sigma));
        }
    }
    for (i, j, v) in mat.iter() {
        trip.push((n + i, j, v));
        trip.push((j, n + i, v));
    }
    for i in 0..rows {
        trip.push((n + i, n + i, -1.0 / rho[i]));
    }
    let kkt = CscMatrix::from_triplets(n + rows, n + rows, &trip).expect("blocks do not overlap");
    let perm = minimum_degree(&kkt, None);
    let fact = LdlFactor::factorize(&kkt, Some(&perm), 0.0).map_err(|e| SolverError::Unsupported {
        backend: "admm".into(),
        reason: format!("KKT factorization failed: {e}"),
    })?;

    let (mut x, mut y) = match &settings.warm_start {
        Some(w) if w.z.len() == n => {
            let mut y = vec![0.0; rows];
            if let Some(l) = w.lambda.as_ref().filter(|l| l.len() == p) {
                y[..p].copy_from_slice(l);
            }
            if let Some(mu) = w.mu.as_ref().filter(|mu| mu.len() == m) {
                y[p..].copy_from_slice(mu);
            }
            (w.z.clone(), y)
        }
        _ => (vec![0.0; n], vec![0.0; rows]),
    };
    let mut zc: Vec<f64> = mat.mul_vec(&x).into_iter().enumerate().map(|(i, v)| project(i, v)).collect();

    let split = |y: &[f64]| (y[..p].to_vec(), y[p..].to_vec());
    let converged = |x: &[f64], y: &[f64]| {
        let (l, mu) = split(y);
        let rp = primal_residual(problem, x);
        let rd = dual_residual(problem, x, &l, &mu);
        (rp, rd, rp <= settings.eps_abs && rd <= settings.eps_abs)
    };

    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let (mut r_p, mut r_d, done) = converged(&x, &y);
    if done {
        status = SolveStatus::Solved;
    } else {
        let mut rhs = vec![0.0; n + rows];
        for it in 1..=settings.max_iterations {
            iterations = it;
            if deadline.is_some_and(|t| Instant::now() > t) {
                break;
            }
            for j in 0..n {
                rhs[j] = admm.sigma * x[j] - problem.q()[j];
            }
            for i in 0..rows {
                rhs[n + i] = zc[i] - y[i] / rho[i];
            }
            let sol = fact.solve(&rhs);
            for j in 0..n {
                x[j] = admm.alpha * sol[j] + (1.0 - admm.alpha) * x[j];
            }
            for i in 0..rows {
                let nu = sol[n + i];
                let z_tilde = zc[i] + (nu - y[i]) / rho[i];
                let relaxed = admm.alpha * z_tilde + (1.0 - admm.alpha) * zc[i];
                let z_new = project(i, relaxed + y[i] / rho[i]);
                y[i] += rho[i] * (relaxed - z_new);
                zc[i] = z_new;
            }
            let (rp, rd, ok) = converged(&x, &y);
            r_p = rp;
            r_d = rd;
            if ok {
                status = SolveStatus::Solved;
                break;
            }
        }
    }

    let (mut lambda, mut mu) = split(&y);
    if admm.polish && status == SolveStatus::Solved && m > 0 {
        let active: Vec<usize> = (0..m)
            .filter(|&j| upper[p + j] - zc[p + j] < y[p + j])
            .collect();
        if let Some((zp, lp, mp)) = polish(problem, &active) {
            let rp = primal_residual(problem, &zp);
            let rd = dual_residual(problem, &zp, &lp, &mp);
            let dual_ok = mp.iter().all(|&v| v >= -settings.eps_abs);
            if dual_ok && rp <= r_p.max(settings.eps_abs) && rd <= r_d.max(settings.eps_abs) {
                x = zp;
                lambda = lp;
                mu = mp.into_iter().map(|v| v.max(0.0)).collect();
                r_p = primal_residual(problem, &x);
                r_d = dual_residual(problem, &x, &lambda, &mu);
            }
        }
    }

    Ok(PrimalDualPoint {
        z: x,
        lambda: Some(lambda),
        mu: Some(mu),
        status,
        r_p,
        r_d,
        iterations,
        working_set: None,
    })
}

/// Exact solution of the equality QP with rows `active` held tight.
fn polish(problem: &QpProblem, active: &[usize]) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, p, m) = problem.dims();
    let kkt = assemble_reduced_kkt(problem, active).ok()?;
    let fact = factorize_uncounted(kkt, 0.0);
    if fact.mode() != FactorMode::Direct {
        return None;
    }
    let mut rhs: Vec<f64> = problem.q().iter().map(|v| -v).collect();
    rhs.extend_from_slice(problem.b());
    rhs.extend(active.iter().map(|&j| problem.d()[j]));
    let sol = fact.solve(&rhs).ok()?;
    let mut mu = vec![0.0; m];
    for (k, &j) in active.iter().enumerate() {
        mu[j] = sol[n + p + k];
    }
    Some((sol[..n].to_vec(), sol[n..n + p].to_vec(), mu))
}
