//! Gradient verification against finite differences and the full implicit
//! system.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use super::{diff_error, emit, CliError, Common, Suite, EXIT_CHECK_FAILED, EXIT_OK};
use crate::diff::{dqp_solve, DifferentiableSolution, DqpOptions, FixedMask, GradientBundle, ParamDirection};
use crate::oracles::{finite_difference_jacobian, full_implicit_jacobian};
use crate::problem::QpProblem;
use crate::solvers::{Registry, SolveSettings, SolverBackend};
use crate::sparse::CscMatrix;

/// Relative error bound for a pass.
pub const PASS_TOL: f64 = 1e-4;
/// Entries sampled per vector block.
pub const MAX_VECTOR_PARAMS: usize = 30;
/// Entries sampled per matrix block.
pub const MAX_MATRIX_PARAMS: usize = 10;

/// A single scalar parameter. `P(i, j)` with `i ≤ j` moves both
/// symmetric entries together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Q(usize),
    B(usize),
    D(usize),
    P(usize, usize),
    A(usize, usize),
    C(usize, usize),
}

impl Param {
    fn direction(self, problem: &QpProblem) -> ParamDirection {
        let (n, p, m) = problem.dims();
        let unit = |len: usize, i: usize| {
            let mut v = vec![0.0; len];
            v[i] = 1.0;
            Some(v)
        };
        let entry = |r: usize, c: usize, list: &[(usize, usize)]| {
            let trip: Vec<_> = list.iter().map(|&(i, j)| (i, j, 1.0)).collect();
            Some(CscMatrix::from_triplets(r, c, &trip).expect("unit entries"))
        };
        let mut dir = ParamDirection::default();
        match self {
            Param::Q(i) => dir.dq = unit(n, i),
            Param::B(i) => dir.db = unit(p, i),
            Param::D(i) => dir.dd = unit(m, i),
            Param::P(i, j) if i == j => dir.dp = entry(n, n, &[(i, i)]),
            Param::P(i, j) => dir.dp = entry(n, n, &[(i, j), (j, i)]),
            Param::A(i, j) => dir.da = entry(p, n, &[(i, j)]),
            Param::C(i, j) => dir.dc = entry(m, n, &[(i, j)]),
        }
        dir
    }

    fn read(self, g: &GradientBundle) -> f64 {
        let mat = |m: &Option<CscMatrix>, i: usize, j: usize| m.as_ref().and_then(|m| m.get(i, j)).unwrap_or(0.0);
        let vec = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map_or(0.0, |v| v[i]);
        match self {
            Param::Q(i) => vec(&g.grad_q, i),
            Param::B(i) => vec(&g.grad_b, i),
            Param::D(i) => vec(&g.grad_d, i),
            Param::P(i, j) if i == j => mat(&g.grad_p, i, i),
            Param::P(i, j) => mat(&g.grad_p, i, j) + mat(&g.grad_p, j, i),
            Param::A(i, j) => mat(&g.grad_a, i, j),
            Param::C(i, j) => mat(&g.grad_c, i, j),
        }
    }
}

fn spread<T: Copy>(items: &[T], cap: usize) -> Vec<T> {
    let k = items.len().min(cap);
    (0..k).map(|t| items[t * items.len() / k]).collect()
}

/// Evenly spaced entries of every block.
pub fn select_params(problem: &QpProblem) -> Vec<Param> {
    let (n, p, m) = problem.dims();
    let mut out = Vec::new();
    out.extend(spread(&(0..n).collect::<Vec<_>>(), MAX_VECTOR_PARAMS).into_iter().map(Param::Q));
    out.extend(spread(&(0..p).collect::<Vec<_>>(), MAX_VECTOR_PARAMS).into_iter().map(Param::B));
    out.extend(spread(&(0..m).collect::<Vec<_>>(), MAX_VECTOR_PARAMS).into_iter().map(Param::D));
    let upper: Vec<_> = problem.p().iter().filter(|(i, j, _)| i <= j).map(|(i, j, _)| (i, j)).collect();
    out.extend(spread(&upper, MAX_MATRIX_PARAMS).into_iter().map(|(i, j)| Param::P(i, j)));
    let a: Vec<_> = problem.a().iter().map(|(i, j, _)| (i, j)).collect();
    out.extend(spread(&a, MAX_MATRIX_PARAMS).into_iter().map(|(i, j)| Param::A(i, j)));
    let c: Vec<_> = problem.c().iter().map(|(i, j, _)| (i, j)).collect();
    out.extend(spread(&c, MAX_MATRIX_PARAMS).into_iter().map(|(i, j)| Param::C(i, j)));
    out
}

/// `base` with every parameter shifted by its offset.
pub fn perturbed(base: &QpProblem, params: &[Param], offsets: &[f64]) -> QpProblem {
    let (mut p, mut q, mut a, mut b, mut c, mut d) = base.clone().into_parts();
    let bump = |mat: &mut CscMatrix, i: usize, j: usize, t: f64| {
        let k = mat.position(i, j).expect("parameter on the pattern");
        mat.values_mut()[k] += t;
    };
    for (&param, &t) in params.iter().zip(offsets) {
        if t == 0.0 {
            continue;
        }
        match param {
            Param::Q(i) => q[i] += t,
            Param::B(i) => b[i] += t,
            Param::D(i) => d[i] += t,
            Param::P(i, j) => {
                bump(&mut p, i, j, t);
                if i != j {
                    bump(&mut p, j, i, t);
                }
            }
            Param::A(i, j) => bump(&mut a, i, j, t),
            Param::C(i, j) => bump(&mut c, i, j, t),
        }
    }
    QpProblem::new(p, q, a, b, c, d).expect("perturbation keeps shapes")
}

/// Jacobian of `(z, λ, μ)` with respect to `params`, one backward pass
/// per output row. Rows of `μ` off the active set are zero.
pub fn backward_jacobian(sol: &DifferentiableSolution, params: &[Param]) -> DMatrix<f64> {
    let (n, p, m) = sol.problem().dims();
    let mut jac = DMatrix::zeros(n + p + m, params.len());
    for row in 0..n + p + m {
        let mut gz = vec![0.0; n];
        let mut gl = vec![0.0; p];
        let mut gm = vec![0.0; m];
        if row < n {
            gz[row] = 1.0;
        } else if row < n + p {
            gl[row - n] = 1.0;
        } else if sol.active().contains(row - n - p) {
            gm[row - n - p] = 1.0;
        } else {
            continue;
        }
        let g = sol
            .backward(&gz, Some(&gl), Some(&gm), FixedMask::default())
            .expect("gradient shapes match");
        for (k, param) in params.iter().enumerate() {
            jac[(row, k)] = param.read(&g);
        }
    }
    jac
}

/// `‖a_k − b_k‖∞ / max(1, ‖b_k‖∞)` per column.
pub fn column_errors(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    (0..a.ncols())
        .map(|k| {
            let diff = (a.column(k) - b.column(k)).amax();
            diff / b.column(k).amax().max(1.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckGradReport {
    pub label: String,
    pub dims: (usize, usize, usize),
    pub active: usize,
    pub columns: usize,
    /// Reason the check was not run.
    pub skipped: Option<String>,
    /// Max relative error over stable columns.
    pub fd_error: f64,
    pub implicit_error: f64,
    /// Columns whose finite-difference samples changed the active set.
    pub unstable_columns: Vec<usize>,
    pub unstable_error: f64,
    pub passed: bool,
}

impl CheckGradReport {
    pub fn to_text(&self) -> String {
        let (n, p, m) = self.dims;
        let head = format!("problem: {} (n={n}, p={p}, m={m})\n", self.label);
        if let Some(reason) = &self.skipped {
            return format!("{head}skipped: {reason}\n");
        }
        format!(
            "{head}|J| = {}, columns = {}, unstable columns = {}\nmax rel error vs finite differences: {:.3e}\nmax rel error vs implicit system: {:.3e}\nmax rel error on unstable columns: {:.3e}\n{}\n",
            self.active,
            self.columns,
            self.unstable_columns.len(),
            self.fd_error,
            self.implicit_error,
            self.unstable_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn check_grad(
    label: &str,
    problem: &QpProblem,
    backend: &dyn SolverBackend,
    h: f64,
    settings: &SolveSettings,
    options: &DqpOptions,
) -> Result<CheckGradReport, CliError> {
    let sol = dqp_solve(problem, backend, settings, options).map_err(diff_error)?;
    let mut report = CheckGradReport {
        label: label.to_string(),
        dims: problem.dims(),
        active: sol.active().len(),
        columns: 0,
        skipped: None,
        fd_error: f64::NAN,
        implicit_error: f64::NAN,
        unstable_columns: vec![],
        unstable_error: 0.0,
        passed: false,
    };
    let weak = &sol.diagnosis().weakly_active;
    if !weak.is_empty() {
        report.skipped = Some(format!("weakly active rows {weak:?}; not differentiable"));
        report.passed = true;
        return Ok(report);
    }
    let params = select_params(problem);
    report.columns = params.len();
    let bwd = backward_jacobian(&sol, &params);
    let fd = finite_difference_jacobian(|t| perturbed(problem, &params, t), &vec![0.0; params.len()], h, backend)
        .map_err(|e| CliError::new(super::EXIT_SOLVE, format!("finite differences: {e}")))?;
    let mut implicit = DMatrix::zeros(bwd.nrows(), params.len());
    for (k, param) in params.iter().enumerate() {
        let (dz, dl, dm) = full_implicit_jacobian(problem, sol.point(), &param.direction(problem))
            .map_err(|e| CliError::new(super::EXIT_SOLVE, format!("implicit system: {e}")))?;
        let col: Vec<f64> = dz.into_iter().chain(dl).chain(dm).collect();
        implicit.set_column(k, &nalgebra::DVector::from_vec(col));
    }
    let fd_err = column_errors(&bwd, &fd.jacobian);
    let imp_err = column_errors(&bwd, &implicit);
    let stable = |k: &usize| !fd.unstable_columns.contains(k);
    report.fd_error = (0..params.len()).filter(stable).map(|k| fd_err[k]).fold(0.0, f64::max);
    report.unstable_error = fd.unstable_columns.iter().map(|&k| fd_err[k]).fold(0.0, f64::max);
    report.implicit_error = imp_err.iter().copied().fold(0.0, f64::max);
    report.unstable_columns = fd.unstable_columns;
    report.passed = report.fd_error <= PASS_TOL && report.implicit_error <= PASS_TOL;
    Ok(report)
}

pub(crate) fn cmd_checkgrad(
    suite: Suite,
    size: usize,
    dim: usize,
    h: f64,
    common: &Common,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let problem = suite.build(size, dim, common.seed);
    let name = common.solvers(&["active_set"]).remove(0);
    let backend = Registry::with_defaults()
        .get(&name)
        .map_err(|e| CliError::new(super::EXIT_SOLVE, e.to_string()))?;
    let label = format!("{}-{size}-s{}", suite.name(), common.seed);
    let report = check_grad(&label, &problem, backend.as_ref(), h, &common.settings(), &common.options())?;
    let text = if common.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report.to_text()
    };
    emit(common, &text, out)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}
