//! Dense primal active-set method.
//!
//! Steps are computed in range-space form. With `P = LLᵀ` and the working
//! rows `M z = h`, the minimizer on the working set is
//! `z_W = −L⁻ᵀ (w + Uν)` where `w = L⁻¹q`, `U = L⁻¹Mᵀ` and
//! `ν = −(UᵀU)⁻¹(Uᵀw + h)` from a QR of `U`. Each step moves towards `z_W`,
//! so tight rows do not drift. The columns `L⁻¹mⱼ` are computed once per
//! solve.
//!
//! The start is the equality-constrained minimizer. When it violates an
//! inequality, an elastic problem with one slack `t` on every row is solved
//! first; for a large enough weight on `t` its solution is feasible and
//! optimal for the original problem.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, QR};

use super::{Capabilities, PrimalDualPoint, SolveSettings, SolveStatus, SolverBackend, SolverError};
use crate::metrics::{dual_residual, primal_residual};
use crate::problem::QpProblem;

const MAX_ELASTIC_ROUNDS: usize = 6;

struct DenseQp {
    l: DMatrix<f64>,
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
    u_eq: DMatrix<f64>,
    u_in: DMatrix<f64>,
    c_norms: Vec<f64>,
}

enum CoreError {
    NotConvex,
    Dependent,
    Iterations(DVector<f64>, Vec<usize>, usize),
    TimeLimit(DVector<f64>, Vec<usize>, usize),
}

struct CoreResult {
    z: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    working: Vec<usize>,
    iterations: usize,
}

impl DenseQp {
    fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: DMatrix<f64>,
        d: DVector<f64>,
    ) -> Result<Self, CoreError> {
        let l = Cholesky::new(p.clone()).ok_or(CoreError::NotConvex)?.unpack();
        let lsolve = |m: &DMatrix<f64>| -> DMatrix<f64> {
            if m.nrows() == 0 {
                DMatrix::zeros(l.nrows(), 0)
            } else {
                l.solve_lower_triangular(&m.transpose()).expect("Cholesky factor is nonsingular")
            }
        };
        let u_eq = lsolve(&a);
        let u_in = lsolve(&c);
        let c_norms = c.row_iter().map(|r| r.norm()).collect();
        Ok(Self {
            l,
            p,
            q,
            a,
            b,
            c,
            d,
            u_eq,
            u_in,
            c_norms,
        })
    }

    fn from_problem(problem: &QpProblem) -> Result<Self, CoreError> {
        Self::new(
            problem.p().to_dense(),
            DVector::from_column_slice(problem.q()),
            problem.a().to_dense(),
            DVector::from_column_slice(problem.b()),
            problem.c().to_dense(),
            DVector::from_column_slice(problem.d()),
        )
    }

    fn n(&self) -> usize {
        self.q.len()
    }

    fn n_eq(&self) -> usize {
        self.b.len()
    }

    /// `max(0, max_j (Cz − d)_j)`.
    fn max_violation(&self, z: &DVector<f64>) -> f64 {
        (&self.c * z - &self.d).iter().fold(0.0f64, |a, &v| a.max(v))
    }

    fn working_basis(&self, working: &[usize]) -> DMatrix<f64> {
        let n = self.n();
        let mut u = DMatrix::zeros(n, self.n_eq() + working.len());
        u.columns_mut(0, self.n_eq()).copy_from(&self.u_eq);
        for (k, &j) in working.iter().enumerate() {
            u.column_mut(self.n_eq() + k).copy_from(&self.u_in.column(j));
        }
        u
    }

    /// QR of the working basis, or `Dependent` when its columns are not
    /// linearly independent.
    fn basis_qr(&self, working: &[usize]) -> Result<Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>, CoreError> {
        let u = self.working_basis(working);
        let k = u.ncols();
        if k == 0 {
            return Ok(None);
        }
        if k > self.n() {
            return Err(CoreError::Dependent);
        }
        let qr = QR::new(u.clone());
        let r = qr.r();
        let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        if (0..k).any(|i| !(r[(i, i)].abs() > 1e-12 * rmax)) {
            return Err(CoreError::Dependent);
        }
        Ok(Some((u, qr.q(), r)))
    }

    /// Minimizer of the objective with `A` and the rows in `working` held at
    /// equality, with its multipliers `(λ, μ_W)`. One step of iterative
    /// refinement on the KKT residual follows the range-space solve.
    fn equality_solution(&self, working: &[usize]) -> Result<(DVector<f64>, DVector<f64>), CoreError> {
        let basis = self.basis_qr(working)?;
        let mut h = DVector::zeros(self.n_eq() + working.len());
        h.rows_mut(0, self.n_eq()).copy_from(&self.b);
        for (k, &j) in working.iter().enumerate() {
            h[self.n_eq() + k] = self.d[j];
        }
        let (mut z, mut nu) = self.range_space_solve(basis.as_ref(), &self.q, &h)?;
        let mt = basis.as_ref().map(|_| self.working_rows(working));
        let (r1, r2) = match &mt {
            Some(mt) => (&self.p * &z + &self.q + mt * &nu, mt.transpose() * &z - &h),
            None => (&self.p * &z + &self.q, DVector::zeros(0)),
        };
        let (dz, dnu) = self.range_space_solve(basis.as_ref(), &r1, &(-r2))?;
        z += dz;
        nu += dnu;
        Ok((z, nu))
    }

    /// `[Aᵀ, C_Wᵀ]`.
    fn working_rows(&self, working: &[usize]) -> DMatrix<f64> {
        let mut mt = DMatrix::zeros(self.n(), self.n_eq() + working.len());
        mt.columns_mut(0, self.n_eq()).copy_from(&self.a.transpose());
        for (k, &j) in working.iter().enumerate() {
            mt.column_mut(self.n_eq() + k).copy_from(&self.c.row(j).transpose());
        }
        mt
    }

    /// Solves `Pz + g + Mᵀν = 0`, `Mz = h` given the QR of `U = L⁻¹Mᵀ`.
    fn range_space_solve(
        &self,
        basis: Option<&(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
        g: &DVector<f64>,
        h: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), CoreError> {
        let wq = self.l.solve_lower_triangular(g).expect("nonsingular");
        let Some((u, _, r)) = basis else {
            return Ok((-self.l.tr_solve_lower_triangular(&wq).expect("nonsingular"), DVector::zeros(0)));
        };
        let rhs = u.transpose() * &wq + h;
        let y = r.tr_solve_upper_triangular(&rhs).ok_or(CoreError::Dependent)?;
        let nu = -r.solve_upper_triangular(&y).ok_or(CoreError::Dependent)?;
        let v = wq + u * &nu;
        Ok((-self.l.tr_solve_lower_triangular(&v).expect("nonsingular"), nu))
    }

    fn equality_point(&self, working: &[usize]) -> Result<DVector<f64>, CoreError> {
        Ok(self.equality_solution(working)?.0)
    }

    /// Step to the minimizer on the working set, which holds the working
    /// rows exactly tight, and the multipliers there.
    fn step(&self, z: &DVector<f64>, working: &[usize]) -> Result<(DVector<f64>, DVector<f64>), CoreError> {
        let (target, nu) = self.equality_solution(working)?;
        Ok((target - z, nu))
    }

    /// Primal active-set iterations from a feasible `z` whose working rows
    /// are tight.
    fn run(
        &self,
        mut z: DVector<f64>,
        mut working: Vec<usize>,
        max_iter: usize,
        deadline: Option<Instant>,
    ) -> Result<CoreResult, CoreError> {
        let m = self.d.len();
        let scale = 1.0 + self.q.amax() + self.p.amax() * z.amax().max(1.0);
        let mu_tol = 1e-12 * scale;
        let mut full_step = false;
        for iter in 0..max_iter {
            if deadline.is_some_and(|t| Instant::now() > t) {
                return Err(CoreError::TimeLimit(z, working, iter));
            }
            let (p, nu) = self.step(&z, &working)?;
            // A full basis pins the point, so it is stationary too.
            let stationary = full_step
                || self.n_eq() + working.len() == self.n()
                || p.amax() <= 1e-13 * (1.0 + z.amax());
            if stationary {
                z += &p;
                let mu_w = nu.rows(self.n_eq(), working.len());
                // Most negative multiplier leaves; ties go to the lowest row.
                let mut worst: Option<usize> = None;
                for k in 0..working.len() {
                    if mu_w[k] >= -mu_tol {
                        continue;
                    }
                    worst = match worst {
                        Some(b) if mu_w[b] < mu_w[k] || (mu_w[b] == mu_w[k] && working[b] < working[k]) => Some(b),
                        _ => Some(k),
                    };
                }
                match worst {
                    None => {
                        let mut mu = DVector::zeros(m);
                        for (k, &j) in working.iter().enumerate() {
                            mu[j] = mu_w[k].max(0.0);
                        }
                        let mut order: Vec<usize> = working.clone();
                        order.sort_unstable();
                        return Ok(CoreResult {
                            z,
                            lambda: nu.rows(0, self.n_eq()).into_owned(),
                            mu,
                            working: order,
                            iterations: iter + 1,
                        });
                    }
                    Some(k) => {
                        working.remove(k);
                        full_step = false;
                    }
                }
                continue;
            }
            // Ratio test over rows outside the working set.
            let cp = &self.c * &p;
            let cz = &self.c * &z;
            let mut alpha = 1.0;
            let mut blocking = None;
            let floor = 1e-12 * p.norm();
            for j in 0..m {
                if working.contains(&j) || cp[j] <= floor * self.c_norms[j] {
                    continue;
                }
                let slack = (self.d[j] - cz[j]).max(0.0);
                let a = slack / cp[j];
                if a < alpha {
                    alpha = a;
                    blocking = Some(j);
                }
            }
            z += alpha * p;
            match blocking {
                Some(j) => {
                    working.push(j);
                    full_step = false;
                }
                None => full_step = true,
            }
        }
        Err(CoreError::Iterations(z, working, max_iter))
    }
}

/// Elastic start: minimizes `f(z) + wt + ½t²` subject to `Az = b`,
/// `Cz − t ≤ d`, `t ≥ 0` from the feasible `(z0, max viol)`, raising the
/// weight until `t` vanishes. Returns a feasible `z`, its tight rows and
/// the iterations spent.
fn elastic_start(
    qp: &DenseQp,
    z0: DVector<f64>,
    max_iter: usize,
    deadline: Option<Instant>,
) -> Result<(DVector<f64>, Vec<usize>, usize), CoreError> {
    let n = qp.n();
    let m = qp.d.len();
    let tol = 1e-12 * (1.0 + qp.d.amax());
    let viol = if m == 0 { 0.0 } else { (&qp.c * &z0 - &qp.d).max() };
    if viol <= tol {
        return Ok((z0, Vec::new(), 0));
    }
    let mut p_aux = DMatrix::zeros(n + 1, n + 1);
    p_aux.view_mut((0, 0), (n, n)).copy_from(&qp.p);
    p_aux[(n, n)] = 1.0;
    let mut a_aux = DMatrix::zeros(qp.n_eq(), n + 1);
    a_aux.columns_mut(0, n).copy_from(&qp.a);
    let mut c_aux = DMatrix::zeros(m + 1, n + 1);
    c_aux.view_mut((0, 0), (m, n)).copy_from(&qp.c);
    c_aux.view_mut((0, n), (m + 1, 1)).fill(-1.0);
    let mut d_aux = DVector::zeros(m + 1);
    d_aux.rows_mut(0, m).copy_from(&qp.d);
    let mut z = DVector::zeros(n + 1);
    z.rows_mut(0, n).copy_from(&z0);
    z[n] = viol;
    let mut working = Vec::new();
    let mut weight = 1e2 * (1.0 + qp.q.amax() + qp.p.amax());
    let mut used = 0;
    for _ in 0..MAX_ELASTIC_ROUNDS {
        let mut q_aux = DVector::zeros(n + 1);
        q_aux.rows_mut(0, n).copy_from(&qp.q);
        q_aux[n] = weight;
        let aux = DenseQp::new(p_aux.clone(), q_aux, a_aux.clone(), qp.b.clone(), c_aux.clone(), d_aux.clone())?;
        let res = aux.run(z, working, max_iter.saturating_sub(used), deadline)?;
        used += res.iterations;
        if res.z[n] <= tol {
            let rows = res.working.into_iter().filter(|&j| j < m).collect();
            return Ok((res.z.rows(0, n).into_owned(), rows, used));
        }
        z = res.z;
        working = res.working;
        weight *= 1e3;
    }
    Err(CoreError::Iterations(z.rows(0, n).into_owned(), Vec::new(), used))
}

/// Textbook primal active-set solve. Always returns duals and the final
/// working set.
pub fn solve_active_set(problem: &QpProblem, settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError> {
    settings.check()?;
    let deadline = settings.time_limit.map(|t| Instant::now() + t);
    let (n, p, m) = problem.dims();
    let failed = |z: Vec<f64>, status: SolveStatus, iterations: usize, working: Option<Vec<usize>>| {
        let r_p = primal_residual(problem, &z);
        PrimalDualPoint {
            z,
            lambda: None,
            mu: None,
            status,
            r_p,
            r_d: f64::INFINITY,
            iterations,
            working_set: working,
        }
    };
    let qp = match DenseQp::from_problem(problem) {
        Ok(qp) => qp,
        Err(_) => {
            return Err(SolverError::Unsupported {
                backend: "active_set".into(),
                reason: "P is not positive definite".into(),
            })
        }
    };

    let warm = settings.warm_start.as_ref().and_then(|w| {
        let ws = w.working_set.clone()?;
        if ws.iter().any(|&j| j >= m) {
            return None;
        }
        let z = qp.equality_point(&ws).ok()?;
        (qp.max_violation(&z) <= 1e-12 * (1.0 + qp.d.amax())).then_some((z, ws))
    });
    let (z_start, w_start, spent) = match warm {
        Some((z, ws)) => (z, ws, 0),
        None => {
            let z_eq = match qp.equality_point(&[]) {
                Ok(z) => z,
                Err(_) => return Err(SolverError::RankDeficient("equality rows are dependent".into())),
            };
            match elastic_start(&qp, z_eq, settings.max_iterations, deadline) {
                // Re-solve on the tight rows to remove drift from the slack.
                Ok((z, ws, spent)) => match qp.equality_point(&ws) {
                    Ok(exact) if qp.max_violation(&exact) <= 1e-12 * (1.0 + qp.d.amax()) => (exact, ws, spent),
                    _ => (z, ws, spent),
                },
                Err(CoreError::Iterations(z, _, it)) => {
                    return Ok(failed(z.as_slice().to_vec(), SolveStatus::Failed, it, None))
                }
                Err(CoreError::TimeLimit(z, _, it)) => {
                    return Ok(failed(z.as_slice().to_vec(), SolveStatus::MaxIter, it, None))
                }
                Err(_) => return Ok(failed(vec![0.0; n], SolveStatus::Failed, 0, None)),
            }
        }
    };

    let result = match qp.run(z_start.clone(), w_start, settings.max_iterations, deadline) {
        Err(CoreError::Dependent) => qp.run(z_start, Vec::new(), settings.max_iterations, deadline),
        other => other,
    };
    match result {
        Ok(res) => {
            let z = res.z.as_slice().to_vec();
            let lambda = res.lambda.as_slice().to_vec();
            let mu = res.mu.as_slice().to_vec();
            let r_p = primal_residual(problem, &z);
            let r_d = dual_residual(problem, &z, &lambda, &mu);
            let status = if r_p <= settings.eps_abs && r_d <= settings.eps_abs {
                SolveStatus::Solved
            } else {
                SolveStatus::Failed
            };
            debug_assert_eq!(lambda.len(), p);
            Ok(PrimalDualPoint {
                z,
                lambda: Some(lambda),
                mu: Some(mu),
                status,
                r_p,
                r_d,
                iterations: spent + res.iterations,
                working_set: Some(res.working),
            })
        }
        Err(CoreError::Iterations(z, w, it)) | Err(CoreError::TimeLimit(z, w, it)) => {
            let mut w = w;
            w.sort_unstable();
            Ok(failed(z.as_slice().to_vec(), SolveStatus::MaxIter, it, Some(w)))
        }
        Err(CoreError::Dependent) => Ok(failed(vec![0.0; n], SolveStatus::Failed, 0, None)),
        Err(CoreError::NotConvex) => unreachable!("checked above"),
    }
}

pub struct ActiveSetSolver;

impl SolverBackend for ActiveSetSolver {
    fn name(&self) -> &str {
        "active_set"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            returns_duals: true,
            supports_sparse: false,
            supports_warm_start: true,
        }
    }

    fn solve(&self, problem: &QpProblem, settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError> {
        solve_active_set(problem, settings)
    }
}
