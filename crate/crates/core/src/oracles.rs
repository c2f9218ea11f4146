//! Ground-truth machinery for tests and gradient checks: active-subset
//! enumeration, central finite differences, and the unreduced implicit
//! differentiation system with complementarity rows.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::active_set::identify;
use crate::diff::ParamDirection;
use crate::linalg::condition_estimate;
use crate::metrics::{dual_residual, primal_residual};
use crate::problem::QpProblem;
use crate::solvers::{Capabilities, PrimalDualPoint, SolveSettings, SolveStatus, SolverBackend, SolverError};

/// Largest inequality count accepted by [`brute_force_solve`].
pub const BRUTE_FORCE_MAX_M: usize = 20;
/// Dual feasibility slack for an enumerated subset.
const MU_SLACK: f64 = 1e-10;
/// Threshold used to compare active sets between finite-difference samples.
pub const FD_ACTIVE_TOL: f64 = 1e-7;
/// Tolerance of the inner solves behind finite differences.
pub const FD_EPS_ABS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("enumeration needs m <= {BRUTE_FORCE_MAX_M}, got {0}")]
    TooManyConstraints(usize),
    #[error("no active subset yields a KKT point; the problem is infeasible")]
    Infeasible,
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("solver returned status {0:?}")]
    NotSolved(SolveStatus),
    #[error("solver did not return duals")]
    MissingDuals,
    #[error("implicit system is singular; weakly active rows: {weakly_active:?}")]
    Degenerate { weakly_active: Vec<usize> },
    #[error("direction does not match the problem: {0}")]
    Shape(String),
}

/// Dense saddle solve with rows `A` and `C_S` as equalities.
fn subset_kkt(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    subset: &[usize],
) -> Option<DVector<f64>> {
    let n = q.len();
    let ne = b.len();
    let k = subset.len();
    if ne + k > n {
        return None;
    }
    let order = n + ne + k;
    let mut kkt = DMatrix::zeros(order, order);
    let mut rhs = DVector::zeros(order);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    kkt.view_mut((n, 0), (ne, n)).copy_from(a);
    kkt.view_mut((0, n), (n, ne)).copy_from(&a.transpose());
    for (r, &j) in subset.iter().enumerate() {
        for col in 0..n {
            kkt[(n + ne + r, col)] = c[(j, col)];
            kkt[(col, n + ne + r)] = c[(j, col)];
        }
        rhs[n + ne + r] = d[j];
    }
    rhs.rows_mut(0, n).copy_from(&(-q));
    rhs.rows_mut(n, ne).copy_from(b);
    let lu = kkt.clone().lu();
    let u = lu.u();
    let umax = (0..order).map(|i| u[(i, i)].abs()).fold(0.0, f64::max);
    if (0..order).any(|i| !(u[(i, i)].abs() > 1e-13 * umax)) {
        return None;
    }
    lu.solve(&rhs)
}

/// Enumerates every subset of inequality rows, smallest first, and returns
/// the first one whose equality-constrained solution is primal feasible on
/// the remaining rows with nonnegative multipliers.
pub fn brute_force_solve(problem: &QpProblem) -> Result<PrimalDualPoint, OracleError> {
    let (n, ne, m) = problem.dims();
    if m > BRUTE_FORCE_MAX_M {
        return Err(OracleError::TooManyConstraints(m));
    }
    let p = problem.p().to_dense();
    let q = DVector::from_column_slice(problem.q());
    let a = problem.a().to_dense();
    let b = DVector::from_column_slice(problem.b());
    let c = problem.c().to_dense();
    let d = DVector::from_column_slice(problem.d());

    let mut masks: Vec<u32> = (0..(1u32 << m)).collect();
    masks.sort_by_key(|s| (s.count_ones(), *s));
    for mask in masks {
        let subset: Vec<usize> = (0..m).filter(|&j| mask >> j & 1 == 1).collect();
        let Some(sol) = subset_kkt(&p, &q, &a, &b, &c, &d, &subset) else {
            continue;
        };
        let z = sol.rows(0, n).into_owned();
        let mu_s = sol.rows(n + ne, subset.len());
        if mu_s.iter().any(|&v| v < -MU_SLACK) {
            continue;
        }
        let cz = &c * &z;
        let feasible = (0..m).all(|j| {
            mask >> j & 1 == 1 || cz[j] - d[j] <= 1e-10 * (1.0 + d[j].abs() + c.row(j).norm() * z.norm())
        });
        if !feasible {
            continue;
        }
        let mut mu = vec![0.0; m];
        for (r, &j) in subset.iter().enumerate() {
            mu[j] = mu_s[r].max(0.0);
        }
        let z = z.as_slice().to_vec();
        let lambda = sol.rows(n, ne).as_slice().to_vec();
        let r_p = primal_residual(problem, &z);
        let r_d = dual_residual(problem, &z, &lambda, &mu);
        return Ok(PrimalDualPoint {
            z,
            lambda: Some(lambda),
            mu: Some(mu),
            status: SolveStatus::Solved,
            r_p,
            r_d,
            iterations: 1,
            working_set: Some(subset),
        });
    }
    Err(OracleError::Infeasible)
}

/// Enumeration oracle exposed as a backend.
pub struct BruteForceSolver;

impl SolverBackend for BruteForceSolver {
    fn name(&self) -> &str {
        "brute_force"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            returns_duals: true,
            supports_sparse: false,
            supports_warm_start: false,
        }
    }

    fn solve(&self, problem: &QpProblem, _settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError> {
        match brute_force_solve(problem) {
            Ok(p) => Ok(p),
            Err(OracleError::Infeasible) => {
                let z = vec![0.0; problem.n()];
                let r_p = primal_residual(problem, &z);
                Ok(PrimalDualPoint {
                    z,
                    lambda: None,
                    mu: None,
                    status: SolveStatus::Failed,
                    r_p,
                    r_d: f64::INFINITY,
                    iterations: 0,
                    working_set: None,
                })
            }
            Err(e) => Err(SolverError::Unsupported {
                backend: "brute_force".into(),
                reason: e.to_string(),
            }),
        }
    }
}

/// Columns are parameters. Rows are `(z, λ, μ)` of length `n + p + m`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdJacobian {
    pub jacobian: DMatrix<f64>,
    /// Columns whose `±h` samples have different active sets.
    pub unstable_columns: Vec<usize>,
}

fn stacked_solution(problem: &QpProblem, backend: &dyn SolverBackend) -> Result<(DVector<f64>, Vec<usize>), OracleError> {
    let settings = SolveSettings::with_eps(FD_EPS_ABS);
    let pt = backend
        .solve(problem, &settings)
        .map_err(|e| OracleError::Solver(e.to_string()))?;
    if !pt.is_solved() {
        return Err(OracleError::NotSolved(pt.status));
    }
    if !pt.has_duals(problem) {
        return Err(OracleError::MissingDuals);
    }
    let mut v = pt.z.clone();
    v.extend(pt.lambda.clone().unwrap_or_default());
    v.extend(pt.mu.clone().unwrap_or_default());
    let active = identify(problem, &pt.z, FD_ACTIVE_TOL).indices().to_vec();
    Ok((DVector::from_vec(v), active))
}

/// Central differences `(ζ(θ + h e_k) − ζ(θ − h e_k)) / 2h` with inner
/// solves at [`FD_EPS_ABS`].
pub fn finite_difference_jacobian<F>(
    param_map: F,
    theta0: &[f64],
    h: f64,
    backend: &dyn SolverBackend,
) -> Result<FdJacobian, OracleError>
where
    F: Fn(&[f64]) -> QpProblem,
{
    let base = param_map(theta0);
    let rows = base.n() + base.n_eq() + base.n_ineq();
    let mut jacobian = DMatrix::zeros(rows, theta0.len());
    let mut unstable_columns = Vec::new();
    let mut theta = theta0.to_vec();
    for k in 0..theta0.len() {
        theta[k] = theta0[k] + h;
        let (plus, j_plus) = stacked_solution(&param_map(&theta), backend)?;
        theta[k] = theta0[k] - h;
        let (minus, j_minus) = stacked_solution(&param_map(&theta), backend)?;
        theta[k] = theta0[k];
        if j_plus != j_minus {
            unstable_columns.push(k);
        }
        jacobian.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    Ok(FdJacobian {
        jacobian,
        unstable_columns,
    })
}

/// The `(n + p + m)`-square matrix
/// `[[P, Aᵀ, Cᵀ], [A, 0, 0], [D(μ)C, 0, D(Cz − d)]]`.
pub fn full_implicit_matrix(problem: &QpProblem, z: &[f64], mu: &[f64]) -> DMatrix<f64> {
    let (n, ne, m) = problem.dims();
    let order = n + ne + m;
    let c = problem.c().to_dense();
    let a = problem.a().to_dense();
    let r = problem.inequality_residuals(z);
    let mut k = DMatrix::zeros(order, order);
    k.view_mut((0, 0), (n, n)).copy_from(&problem.p().to_dense());
    k.view_mut((0, n), (n, ne)).copy_from(&a.transpose());
    k.view_mut((0, n + ne), (n, m)).copy_from(&c.transpose());
    k.view_mut((n, 0), (ne, n)).copy_from(&a);
    for j in 0..m {
        for col in 0..n {
            k[(n + ne + j, col)] = mu[j] * c[(j, col)];
        }
        k[(n + ne + j, n + ne + j)] = r[j];
    }
    k
}

/// Rows with `|r_j| <= tol` and `|μ_j| <= tol`.
fn weakly_active(problem: &QpProblem, z: &[f64], mu: &[f64], tol: f64) -> Vec<usize> {
    problem
        .inequality_residuals(z)
        .iter()
        .zip(mu)
        .enumerate()
        .filter(|(_, (r, m))| r.abs() <= tol && m.abs() <= tol)
        .map(|(j, _)| j)
        .collect()
}

/// Directional derivative of `(z, λ, μ)` from the unreduced implicit system,
/// solved by dense LU.
pub fn full_implicit_jacobian(
    problem: &QpProblem,
    point: &PrimalDualPoint,
    dir: &ParamDirection,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), OracleError> {
    let (n, ne, m) = problem.dims();
    dir.check(problem).map_err(|e| OracleError::Shape(e.to_string()))?;
    let lambda = match &point.lambda {
        Some(l) => l.clone(),
        None if ne == 0 => vec![],
        None => return Err(OracleError::MissingDuals),
    };
    let mu = match &point.mu {
        Some(v) => v.clone(),
        None if m == 0 => vec![],
        None => return Err(OracleError::MissingDuals),
    };
    let z = DVector::from_column_slice(&point.z);
    let lam = DVector::from_column_slice(&lambda);
    let muv = DVector::from_column_slice(&mu);

    let dense_or_zero = |mat: &Option<crate::sparse::CscMatrix>, r: usize, c: usize| {
        mat.as_ref().map_or_else(|| DMatrix::zeros(r, c), |m| m.to_dense())
    };
    let vec_or_zero = |v: &Option<Vec<f64>>, len: usize| {
        v.as_ref().map_or_else(|| DVector::zeros(len), |x| DVector::from_column_slice(x))
    };
    let dp = dense_or_zero(&dir.dp, n, n);
    let da = dense_or_zero(&dir.da, ne, n);
    let dc = dense_or_zero(&dir.dc, m, n);
    let dq = vec_or_zero(&dir.dq, n);
    let db = vec_or_zero(&dir.db, ne);
    let dd = vec_or_zero(&dir.dd, m);

    let mut rhs = DVector::zeros(n + ne + m);
    rhs.rows_mut(0, n)
        .copy_from(&-(&dp * &z + &dq + da.transpose() * &lam + dc.transpose() * &muv));
    rhs.rows_mut(n, ne).copy_from(&-(&da * &z - &db));
    let dcz = &dc * &z - &dd;
    for j in 0..m {
        rhs[n + ne + j] = -mu[j] * dcz[j];
    }

    let k = full_implicit_matrix(problem, &point.z, &mu);
    let degenerate = || OracleError::Degenerate {
        weakly_active: weakly_active(problem, &point.z, &mu, 1e-8),
    };
    if !(condition_estimate(&k) < 1e14) {
        return Err(degenerate());
    }
    let sol = k.lu().solve(&rhs).ok_or_else(degenerate)?;
    Ok((
        sol.rows(0, n).as_slice().to_vec(),
        sol.rows(n, ne).as_slice().to_vec(),
        sol.rows(n + ne, m).as_slice().to_vec(),
    ))
}
