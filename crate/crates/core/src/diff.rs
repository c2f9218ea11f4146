//! Differentiation through a black-box QP solve.
//!
//! After the backend returns a primal point, the active set `J` is read off
//! the residuals and the reduced KKT matrix `K_J` is factorized once. That
//! factorization yields the duals `ζ = K_J⁻¹(−q, b, d_J)`, forward
//! derivatives
//!
//! ```text
//! δζ = K_J⁻¹ [(−δq, δb, δd_J) − δK_J ζ]
//! ```
//!
//! and the adjoint `(d_z, d_λ, d_μ) = −K_J⁻¹ (g_z, g_λ, g_μJ)` behind every
//! parameter gradient. `K_J` is symmetric so both directions share one
//! solve routine.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::active_set::{diagnose, identify, refine, ActiveSet, DifferentiabilityDiagnosis, DEFAULT_EPS_ACTIVE};
use crate::kkt::{assemble_reduced_kkt, factorize, factorize_least_squares, FactorMode, KktFactorization};
use crate::metrics::{residuals_of, Residuals};
use crate::problem::{normalize_constraints, validate, ProblemError, QpProblem, RowScaling, SYMMETRY_TOL};
use crate::solvers::{PrimalDualPoint, Registry, RegistryError, SolveSettings, SolverBackend, SolverError};
use crate::sparse::CscMatrix;

/// Backend and recovered duals further apart than this are flagged.
pub const DUAL_DISCREPANCY_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error(transparent)]
    Backend(#[from] SolverError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("backend returned status {:?}", .0.status)]
    NotSolved(Box<PrimalDualPoint>),
    #[error("problem failed validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// A tangent direction in parameter space. `None` blocks are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamDirection {
    pub dp: Option<CscMatrix>,
    pub dq: Option<Vec<f64>>,
    pub da: Option<CscMatrix>,
    pub db: Option<Vec<f64>>,
    pub dc: Option<CscMatrix>,
    pub dd: Option<Vec<f64>>,
}

impl ParamDirection {
    pub fn check(&self, problem: &QpProblem) -> Result<(), DiffError> {
        let (n, p, m) = problem.dims();
        let mat = |name: &str, x: &Option<CscMatrix>, r: usize, c: usize| match x {
            Some(x) if (x.nrows(), x.ncols()) != (r, c) => Err(DiffError::Shape(format!(
                "{name} is {}x{}, expected {r}x{c}",
                x.nrows(),
                x.ncols()
            ))),
            _ => Ok(()),
        };
        let vec = |name: &str, x: &Option<Vec<f64>>, len: usize| match x {
            Some(x) if x.len() != len => Err(DiffError::Shape(format!("{name} has length {}, expected {len}", x.len()))),
            _ => Ok(()),
        };
        mat("dP", &self.dp, n, n)?;
        mat("dA", &self.da, p, n)?;
        mat("dC", &self.dc, m, n)?;
        vec("dq", &self.dq, n)?;
        vec("db", &self.db, p)?;
        vec("dd", &self.dd, m)?;
        if let Some(dp) = &self.dp {
            if !dp.is_symmetric(SYMMETRY_TOL) {
                return Err(DiffError::Shape("dP is not symmetric".into()));
            }
        }
        Ok(())
    }
}

/// `true` marks a parameter held fixed: no gradient is computed for it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FixedMask {
    pub p: bool,
    pub q: bool,
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub d: bool,
}

impl FixedMask {
    /// Only the listed blocks are free.
    pub fn all_except(free: &[&str]) -> Self {
        let f = |k: &str| !free.contains(&k);
        Self {
            p: f("P"),
            q: f("q"),
            a: f("A"),
            b: f("b"),
            c: f("C"),
            d: f("d"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grad_p: Option<CscMatrix>,
    pub grad_q: Option<Vec<f64>>,
    pub grad_a: Option<CscMatrix>,
    pub grad_b: Option<Vec<f64>>,
    pub grad_c: Option<CscMatrix>,
    pub grad_d: Option<Vec<f64>>,
    pub fixed: FixedMask,
}

impl GradientBundle {
    /// `⟨∇ℓ, dir⟩` summed over all blocks that have a gradient.
    pub fn pair(&self, dir: &ParamDirection) -> f64 {
        let m = |g: &Option<CscMatrix>, d: &Option<CscMatrix>| match (g, d) {
            (Some(g), Some(d)) => g.frobenius_dot(d),
            _ => 0.0,
        };
        let v = |g: &Option<Vec<f64>>, d: &Option<Vec<f64>>| match (g, d) {
            (Some(g), Some(d)) => g.iter().zip(d).map(|(a, b)| a * b).sum(),
            _ => 0.0,
        };
        m(&self.grad_p, &dir.dp)
            + v(&self.grad_q, &dir.dq)
            + m(&self.grad_a, &dir.da)
            + v(&self.grad_b, &dir.db)
            + m(&self.grad_c, &dir.dc)
            + v(&self.grad_d, &dir.dd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqpOptions {
    pub eps_active: f64,
    pub normalize: bool,
    pub refine: bool,
    pub regularization: f64,
    pub project_sparsity: bool,
    pub check_convexity: bool,
}

impl Default for DqpOptions {
    fn default() -> Self {
        Self {
            eps_active: DEFAULT_EPS_ACTIVE,
            normalize: false,
            refine: false,
            regularization: 0.0,
            project_sparsity: true,
            check_convexity: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DifferentiableSolution {
    problem: QpProblem,
    /// Normalized copy when normalization is on; the identity otherwise.
    working: QpProblem,
    scaling: Option<RowScaling>,
    point: PrimalDualPoint,
    backend_point: PrimalDualPoint,
    active: ActiveSet,
    fact: KktFactorization,
    diagnosis: DifferentiabilityDiagnosis,
    /// Duals in working scaling, ordered `(λ, μ_J)`.
    working_duals: Vec<f64>,
    dual_discrepancy: Option<f64>,
    project_sparsity: bool,
    solve_time: Duration,
    post_solve_time: Duration,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Solves `K_J ζ = (−q, b, d_J)` and returns the dual block `(λ, μ_J)`.
fn reduced_duals(problem: &QpProblem, active: &[usize], fact: &KktFactorization) -> Vec<f64> {
    let n = problem.n();
    let mut rhs: Vec<f64> = problem.q().iter().map(|v| -v).collect();
    rhs.extend_from_slice(problem.b());
    rhs.extend(active.iter().map(|&j| problem.d()[j]));
    let sol = fact.solve(&rhs).expect("rhs has the KKT order");
    sol[n..].to_vec()
}

/// Duals from the reduced system: `λ` and `μ` with zeros off `J`. The
/// primal block of the solve is discarded.
pub fn recover_duals(problem: &QpProblem, active: &ActiveSet, fact: &KktFactorization) -> (Vec<f64>, Vec<f64>) {
    let p = problem.n_eq();
    let duals = reduced_duals(problem, active.indices(), fact);
    let mut mu = vec![0.0; problem.n_ineq()];
    for (k, &j) in active.indices().iter().enumerate() {
        mu[j] = duals[p + k];
    }
    (duals[..p].to_vec(), mu)
}

fn divide(v: &[f64], s: &[f64]) -> Vec<f64> {
    v.iter().zip(s).map(|(a, b)| a / b).collect()
}

/// Runs the backend, identifies and factorizes, recovers duals and
/// diagnoses differentiability.
pub fn dqp_solve(
    problem: &QpProblem,
    backend: &dyn SolverBackend,
    settings: &SolveSettings,
    options: &DqpOptions,
) -> Result<DifferentiableSolution, DiffError> {
    if options.check_convexity {
        let report = validate(problem, true);
        if !report.is_ok() {
            return Err(DiffError::Validation(report.messages.join("; ")));
        }
    }
    let t0 = Instant::now();
    let backend_point = backend.solve(problem, settings)?;
    let solve_time = t0.elapsed();
    if !backend_point.is_solved() {
        return Err(DiffError::NotSolved(Box::new(backend_point)));
    }
    let t1 = Instant::now();
    let (working, scaling) = if options.normalize {
        let (w, s) = normalize_constraints(problem)?;
        (w, Some(s))
    } else {
        (problem.clone(), None)
    };
    let z = &backend_point.z;
    let mut active = identify(&working, z, options.eps_active);
    if options.refine {
        active = refine(&working, z, &active, options.regularization);
    }
    let kkt = assemble_reduced_kkt(&working, active.indices()).expect("identified indices are valid");
    let dimension_ok = active.len() + working.n_eq() <= working.n();
    let mut fact = if dimension_ok {
        factorize(kkt, options.regularization)
    } else {
        factorize_least_squares(kkt)
    };
    let mut working_duals = reduced_duals(&working, active.indices(), &fact);
    let to_point = |duals: &[f64]| {
        let p = working.n_eq();
        let mut mu_w = vec![0.0; working.n_ineq()];
        for (k, &j) in active.indices().iter().enumerate() {
            mu_w[j] = duals[p + k];
        }
        let lambda_w = duals[..p].to_vec();
        let (lambda, mu) = match &scaling {
            Some(s) => (divide(&lambda_w, &s.equality), divide(&mu_w, &s.inequality)),
            None => (lambda_w.clone(), mu_w.clone()),
        };
        (lambda_w, mu_w, lambda, mu)
    };
    let (mut lambda_w, mut mu_w, mut lambda, mut mu) = to_point(&working_duals);
    let mut working_point = PrimalDualPoint {
        lambda: Some(lambda_w.clone()),
        mu: Some(mu_w.clone()),
        ..backend_point.clone()
    };
    let diagnosis = diagnose(&working, &working_point, &active, options.eps_active);
    if diagnosis.recommended_mode == FactorMode::LeastSquares && fact.mode() == FactorMode::Direct {
        log::debug!("weakly active rows {:?}; switching to least squares", diagnosis.weakly_active);
        fact = factorize_least_squares(fact.kkt().clone());
        working_duals = reduced_duals(&working, active.indices(), &fact);
        (lambda_w, mu_w, lambda, mu) = to_point(&working_duals);
        working_point.lambda = Some(lambda_w);
        working_point.mu = Some(mu_w);
    }
    let dual_discrepancy = match (&backend_point.lambda, &backend_point.mu) {
        (Some(bl), Some(bm)) => Some(max_abs_diff(bl, &lambda).max(max_abs_diff(bm, &mu))),
        (None, Some(bm)) if lambda.is_empty() => Some(max_abs_diff(bm, &mu)),
        (Some(bl), None) if mu.is_empty() => Some(max_abs_diff(bl, &lambda)),
        _ => None,
    };
    if let Some(gap) = dual_discrepancy.filter(|&g| g > DUAL_DISCREPANCY_TOL) {
        log::warn!("backend duals differ from recovered duals by {gap:.3e}");
    }
    let point = PrimalDualPoint {
        lambda: Some(lambda),
        mu: Some(mu),
        ..backend_point.clone()
    };
    let post_solve_time = t1.elapsed();
    Ok(DifferentiableSolution {
        problem: problem.clone(),
        working,
        scaling,
        point,
        backend_point,
        active,
        fact,
        diagnosis,
        working_duals,
        dual_discrepancy,
        project_sparsity: options.project_sparsity,
        solve_time,
        post_solve_time,
    })
}

/// [`dqp_solve`] with the backend looked up by name.
pub fn dqp_solve_named(
    problem: &QpProblem,
    registry: &Registry,
    backend: &str,
    settings: &SolveSettings,
    options: &DqpOptions,
) -> Result<DifferentiableSolution, DiffError> {
    let backend = registry.get(backend)?;
    dqp_solve(problem, backend.as_ref(), settings, options)
}

/// Derivative of `(z, λ, μ)` along a parameter direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub dz: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub dmu: Vec<f64>,
}

/// Row-norm derivatives `δs_j = c_j·δc_j / s_j`, zero without `δC`.
fn scale_derivative(mat: &CscMatrix, dmat: &Option<CscMatrix>, scales: &[f64]) -> Vec<f64> {
    let mut ds = vec![0.0; mat.nrows()];
    if let Some(dm) = dmat {
        for (i, j, v) in mat.iter() {
            if let Some(dv) = dm.get(i, j) {
                ds[i] += v * dv;
            }
        }
        for (d, s) in ds.iter_mut().zip(scales) {
            *d /= s;
        }
    }
    ds
}

/// Direction of the normalized rows `ĉ = c/s`, `d̂ = d/s`.
fn normalized_block(
    mat: &CscMatrix,
    rhs: &[f64],
    dmat: &Option<CscMatrix>,
    drhs: &Option<Vec<f64>>,
    scales: &[f64],
    ds: &[f64],
) -> (Option<CscMatrix>, Option<Vec<f64>>) {
    let any_ds = ds.iter().any(|&v| v != 0.0);
    let mat_dir = match dmat {
        None => None,
        Some(dm) => {
            let inv: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
            let coef: Vec<f64> = ds.iter().zip(scales).map(|(d, s)| -d / (s * s)).collect();
            Some(dm.scale_rows(&inv).add(&mat.scale_rows(&coef)))
        }
    };
    let rhs_dir = if drhs.is_none() && !any_ds {
        None
    } else {
        let zero = vec![0.0; rhs.len()];
        let dr = drhs.as_ref().unwrap_or(&zero);
        Some(
            (0..rhs.len())
                .map(|i| dr[i] / scales[i] - rhs[i] * ds[i] / (scales[i] * scales[i]))
                .collect(),
        )
    };
    (mat_dir, rhs_dir)
}

impl DifferentiableSolution {
    pub fn problem(&self) -> &QpProblem {
        &self.problem
    }

    /// Point with recovered duals (`μ_j = 0` off `J`).
    pub fn point(&self) -> &PrimalDualPoint {
        &self.point
    }

    /// Point exactly as the backend returned it.
    pub fn backend_point(&self) -> &PrimalDualPoint {
        &self.backend_point
    }

    pub fn active(&self) -> &ActiveSet {
        &self.active
    }

    pub fn diagnosis(&self) -> &DifferentiabilityDiagnosis {
        &self.diagnosis
    }

    pub fn factorization(&self) -> &KktFactorization {
        &self.fact
    }

    pub fn mode(&self) -> FactorMode {
        self.fact.mode()
    }

    pub fn z(&self) -> &[f64] {
        &self.point.z
    }

    pub fn lambda(&self) -> &[f64] {
        self.point.lambda.as_deref().unwrap_or(&[])
    }

    pub fn mu(&self) -> &[f64] {
        self.point.mu.as_deref().unwrap_or(&[])
    }

    /// Largest gap between backend and recovered duals, when the backend
    /// returned any.
    pub fn dual_discrepancy(&self) -> Option<f64> {
        self.dual_discrepancy
    }

    pub fn residuals(&self) -> Residuals {
        residuals_of(&self.problem, self.z(), self.lambda(), self.mu())
    }

    pub fn solve_time(&self) -> Duration {
        self.solve_time
    }

    /// Identification, factorization, dual recovery and diagnosis.
    pub fn post_solve_time(&self) -> Duration {
        self.post_solve_time
    }

    /// Forward derivative along `dir`, scattered to full length.
    pub fn forward_directional(&self, dir: &ParamDirection) -> Result<Tangent, DiffError> {
        dir.check(&self.problem)?;
        match &self.scaling {
            None => Ok(self.forward_working(dir)),
            Some(s) => {
                let ds_eq = scale_derivative(self.problem.a(), &dir.da, &s.equality);
                let ds_in = scale_derivative(self.problem.c(), &dir.dc, &s.inequality);
                let (da, db) = normalized_block(self.problem.a(), self.problem.b(), &dir.da, &dir.db, &s.equality, &ds_eq);
                let (dc, dd) = normalized_block(self.problem.c(), self.problem.d(), &dir.dc, &dir.dd, &s.inequality, &ds_in);
                let wdir = ParamDirection {
                    dp: dir.dp.clone(),
                    dq: dir.dq.clone(),
                    da,
                    db,
                    dc,
                    dd,
                };
                let t = self.forward_working(&wdir);
                // λ = λ̂/s  ⇒  δλ = (δλ̂ − λ δs)/s
                let unscale = |dv: &[f64], v: &[f64], ds: &[f64], sc: &[f64]| -> Vec<f64> {
                    (0..dv.len()).map(|i| (dv[i] - v[i] * ds[i]) / sc[i]).collect()
                };
                Ok(Tangent {
                    dlambda: unscale(&t.dlambda, self.lambda(), &ds_eq, &s.equality),
                    dmu: unscale(&t.dmu, self.mu(), &ds_in, &s.inequality),
                    dz: t.dz,
                })
            }
        }
    }

    fn forward_working(&self, dir: &ParamDirection) -> Tangent {
        let w = &self.working;
        let (n, p, m) = w.dims();
        let active = self.active.indices();
        let z = self.z();
        let lambda_w = &self.working_duals[..p];
        let mut mu_w = vec![0.0; m];
        for (k, &j) in active.iter().enumerate() {
            mu_w[j] = self.working_duals[p + k];
        }

        let mut rhs = vec![0.0; n + p + active.len()];
        if let Some(dq) = &dir.dq {
            for i in 0..n {
                rhs[i] -= dq[i];
            }
        }
        if let Some(dp) = &dir.dp {
            for (r, v) in rhs.iter_mut().zip(dp.mul_vec(z)) {
                *r -= v;
            }
        }
        if let Some(da) = &dir.da {
            for (r, v) in rhs.iter_mut().zip(da.tmul_vec(lambda_w)) {
                *r -= v;
            }
            for (i, v) in da.mul_vec(z).into_iter().enumerate() {
                rhs[n + i] -= v;
            }
        }
        if let Some(db) = &dir.db {
            for i in 0..p {
                rhs[n + i] += db[i];
            }
        }
        if let Some(dc) = &dir.dc {
            for (r, v) in rhs.iter_mut().zip(dc.tmul_vec(&mu_w)) {
                *r -= v;
            }
            let dcz = dc.mul_vec(z);
            for (k, &j) in active.iter().enumerate() {
                rhs[n + p + k] -= dcz[j];
            }
        }
        if let Some(dd) = &dir.dd {
            for (k, &j) in active.iter().enumerate() {
                rhs[n + p + k] += dd[j];
            }
        }
        let sol = self.fact.solve(&rhs).expect("rhs has the KKT order");
        let mut dmu = vec![0.0; m];
        for (k, &j) in active.iter().enumerate() {
            dmu[j] = sol[n + p + k];
        }
        Tangent {
            dz: sol[..n].to_vec(),
            dlambda: sol[n..n + p].to_vec(),
            dmu,
        }
    }

    /// Loss gradients with respect to every free parameter block, given
    /// the loss gradient with respect to `(z, λ, μ)`. Components of
    /// `grad_mu` off the active set are ignored.
    pub fn backward(
        &self,
        grad_z: &[f64],
        grad_lambda: Option<&[f64]>,
        grad_mu: Option<&[f64]>,
        fixed: FixedMask,
    ) -> Result<GradientBundle, DiffError> {
        let (n, p, m) = self.problem.dims();
        if grad_z.len() != n {
            return Err(DiffError::Shape(format!("grad_z has length {}, expected {n}", grad_z.len())));
        }
        if let Some(g) = grad_lambda.filter(|g| g.len() != p) {
            return Err(DiffError::Shape(format!("grad_lambda has length {}, expected {p}", g.len())));
        }
        if let Some(g) = grad_mu.filter(|g| g.len() != m) {
            return Err(DiffError::Shape(format!("grad_mu has length {}, expected {m}", g.len())));
        }
        if let Some(g) = grad_mu {
            let stray = (0..m).filter(|&j| g[j] != 0.0 && !self.active.contains(j)).count();
            if stray > 0 {
                log::debug!("ignoring {stray} dual gradient components outside the active set");
            }
        }
        let Some(s) = &self.scaling else {
            return Ok(self.backward_working(grad_z, grad_lambda, grad_mu, fixed));
        };

        // Working outputs are λ̂ = sλ, μ̂ = sμ.
        let gl_w = grad_lambda.map(|g| divide(g, &s.equality));
        let gm_w = grad_mu.map(|g| divide(g, &s.inequality));
        let inner_fixed = FixedMask {
            a: fixed.a && fixed.b,
            b: fixed.a && fixed.b,
            c: fixed.c && fixed.d,
            d: fixed.c && fixed.d,
            ..fixed
        };
        let wg = self.backward_working(grad_z, gl_w.as_deref(), gm_w.as_deref(), inner_fixed);
        let (grad_a, grad_b) = unnormalize_grad(
            self.problem.a(),
            self.problem.b(),
            &s.equality,
            self.lambda(),
            grad_lambda,
            wg.grad_a.as_ref(),
            wg.grad_b.as_deref(),
            fixed.a,
            fixed.b,
        );
        let (grad_c, grad_d) = unnormalize_grad(
            self.problem.c(),
            self.problem.d(),
            &s.inequality,
            self.mu(),
            grad_mu,
            wg.grad_c.as_ref(),
            wg.grad_d.as_deref(),
            fixed.c,
            fixed.d,
        );
        Ok(GradientBundle {
            grad_a,
            grad_b,
            grad_c,
            grad_d,
            fixed,
            ..wg
        })
    }

    fn backward_working(
        &self,
        grad_z: &[f64],
        grad_lambda: Option<&[f64]>,
        grad_mu: Option<&[f64]>,
        fixed: FixedMask,
    ) -> GradientBundle {
        let w = &self.working;
        let (n, p, m) = w.dims();
        let active = self.active.indices();
        let z = self.z();
        let lambda_w = &self.working_duals[..p];
        let mu_j = &self.working_duals[p..];

        let mut rhs = Vec::with_capacity(n + p + active.len());
        rhs.extend(grad_z.iter().map(|v| -v));
        match grad_lambda {
            Some(g) => rhs.extend(g.iter().map(|v| -v)),
            None => rhs.extend(std::iter::repeat_n(0.0, p)),
        }
        match grad_mu {
            Some(g) => rhs.extend(active.iter().map(|&j| -g[j])),
            None => rhs.extend(std::iter::repeat_n(0.0, active.len())),
        }
        let adj = self.fact.solve(&rhs).expect("rhs has the KKT order");
        let (dz, rest) = adj.split_at(n);
        let (dl, dm) = rest.split_at(p);
        let mut slot = vec![usize::MAX; m];
        for (k, &j) in active.iter().enumerate() {
            slot[j] = k;
        }
        let project = self.project_sparsity;

        let grad_p = (!fixed.p).then(|| {
            let entry = |i: usize, j: usize| 0.5 * (dz[i] * z[j] + z[i] * dz[j]);
            outer_gradient(w.p(), n, n, project, entry)
        });
        let grad_q = (!fixed.q).then(|| dz.to_vec());
        let grad_a = (!fixed.a).then(|| {
            let entry = |i: usize, j: usize| dl[i] * z[j] + lambda_w[i] * dz[j];
            outer_gradient(w.a(), p, n, project, entry)
        });
        let grad_b = (!fixed.b).then(|| dl.iter().map(|v| -v).collect());
        let grad_c = (!fixed.c).then(|| {
            let entry = |i: usize, j: usize| match slot[i] {
                usize::MAX => 0.0,
                k => dm[k] * z[j] + mu_j[k] * dz[j],
            };
            if project {
                outer_gradient(w.c(), m, n, true, entry)
            } else {
                let mut trip = Vec::with_capacity(active.len() * n);
                for &i in active {
                    for j in 0..n {
                        trip.push((i, j, entry(i, j)));
                    }
                }
                CscMatrix::from_triplets(m, n, &trip).expect("distinct entries")
            }
        });
        let grad_d = (!fixed.d).then(|| {
            (0..m)
                .map(|j| match slot[j] {
                    usize::MAX => 0.0,
                    k => -dm[k],
                })
                .collect()
        });
        GradientBundle {
            grad_p,
            grad_q,
            grad_a,
            grad_b,
            grad_c,
            grad_d,
            fixed,
        }
    }
}

/// Gradient of an outer-product form, restricted to the pattern of
/// `pattern` when projecting and dense otherwise.
fn outer_gradient(
    pattern: &CscMatrix,
    rows: usize,
    cols: usize,
    project: bool,
    entry: impl Fn(usize, usize) -> f64,
) -> CscMatrix {
    if project {
        pattern.with_values(pattern.iter().map(|(i, j, _)| entry(i, j)).collect())
    } else {
        let mut trip = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                trip.push((i, j, entry(i, j)));
            }
        }
        CscMatrix::from_triplets(rows, cols, &trip).expect("distinct entries")
    }
}

/// Maps gradients for normalized rows `ĉ = c/s`, `d̂ = d/s` (with
/// `s = ‖c‖` and duals `y = ŷ/s`) back to the original rows.
#[allow(clippy::too_many_arguments)]
fn unnormalize_grad(
    mat: &CscMatrix,
    rhs: &[f64],
    scales: &[f64],
    duals: &[f64],
    grad_duals: Option<&[f64]>,
    grad_mat_w: Option<&CscMatrix>,
    grad_rhs_w: Option<&[f64]>,
    fixed_mat: bool,
    fixed_rhs: bool,
) -> (Option<CscMatrix>, Option<Vec<f64>>) {
    let rows = rhs.len();
    let grad_rhs = (!fixed_rhs).then(|| divide(grad_rhs_w.expect("computed when rhs is free"), scales));
    if fixed_mat {
        return (None, grad_rhs);
    }
    let gm = grad_mat_w.expect("computed when matrix is free");
    let gr = grad_rhs_w.expect("computed when matrix is free");
    // ∂ℓ/∂s from the dual output, the rhs and the matrix rows.
    let mut dls = vec![0.0; rows];
    for i in 0..rows {
        let s = scales[i];
        if let Some(g) = grad_duals {
            dls[i] -= g[i] * duals[i] / s;
        }
        dls[i] -= gr[i] * rhs[i] / (s * s);
    }
    for (i, j, g) in gm.iter() {
        if let Some(v) = mat.get(i, j) {
            dls[i] -= g * v / (scales[i] * scales[i]);
        }
    }
    let inv: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
    let coef: Vec<f64> = dls.iter().zip(scales).map(|(d, s)| d / s).collect();
    let grad = gm.scale_rows(&inv).add(&mat.scale_rows(&coef));
    (Some(grad), grad_rhs)
}
