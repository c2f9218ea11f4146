//! Backend ranking across tolerance regimes.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::{emit, millis, status_name, CliError, Common, Suite, EXIT_OK, EXIT_PARSE};
use crate::metrics::{dual_residual, primal_residual};
use crate::problem::io::load_problem;
use crate::problem::QpProblem;
use crate::solvers::{Registry, SolveSettings};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileCell {
    pub backend: String,
    pub tolerance: f64,
    pub status: String,
    pub time_ms: f64,
    /// `max(r_p, r_d)` recomputed from the returned point.
    pub residual: f64,
    pub met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub cells: Vec<ProfileCell>,
    /// Fastest backend meeting each tolerance, in tolerance order.
    pub fastest: Vec<(f64, Option<String>)>,
}

pub fn run_profile(problem: &QpProblem, backends: &[String], tolerances: &[f64], base: &SolveSettings) -> ProfileReport {
    let registry = Registry::with_defaults();
    let mut cells = Vec::new();
    for backend in backends {
        for &tol in tolerances {
            let settings = SolveSettings {
                eps_abs: tol,
                ..base.clone()
            };
            let t = Instant::now();
            let result = registry.get(backend).map_err(|e| e.to_string()).and_then(|b| {
                b.solve(problem, &settings).map_err(|e| e.to_string())
            });
            let time_ms = millis(t.elapsed());
            let cell = match result {
                Ok(pt) => {
                    let r_p = primal_residual(problem, &pt.z);
                    let residual = match (&pt.lambda, &pt.mu) {
                        (Some(l), Some(m)) => r_p.max(dual_residual(problem, &pt.z, l, m)),
                        _ => f64::NAN,
                    };
                    ProfileCell {
                        backend: backend.clone(),
                        tolerance: tol,
                        status: status_name(pt.status).into(),
                        time_ms,
                        met: pt.is_solved() && residual <= tol,
                        residual,
                    }
                }
                Err(e) => {
                    log::info!("{backend} at {tol:e}: {e}");
                    ProfileCell {
                        backend: backend.clone(),
                        tolerance: tol,
                        status: "error".into(),
                        time_ms,
                        residual: f64::NAN,
                        met: false,
                    }
                }
            };
            cells.push(cell);
        }
    }
    let fastest = tolerances
        .iter()
        .map(|&tol| {
            let best = cells
                .iter()
                .filter(|c| c.tolerance == tol && c.met)
                .min_by(|a, b| a.time_ms.total_cmp(&b.time_ms))
                .map(|c| c.backend.clone());
            (tol, best)
        })
        .collect();
    ProfileReport { cells, fastest }
}

pub fn report_text(report: &ProfileReport, tolerances: &[f64]) -> String {
    let mut s = String::from("backend");
    for tol in tolerances {
        let _ = write!(s, "\teps={tol:e}");
    }
    s.push('\n');
    let mut backends: Vec<&str> = Vec::new();
    for c in &report.cells {
        if !backends.contains(&c.backend.as_str()) {
            backends.push(&c.backend);
        }
    }
    for b in backends {
        s.push_str(b);
        for tol in tolerances {
            match report.cells.iter().find(|c| c.backend == b && c.tolerance == *tol) {
                Some(c) if c.met => {
                    let _ = write!(s, "\t{:.3}ms res={:.1e}", c.time_ms, c.residual);
                }
                Some(c) => {
                    let _ = write!(s, "\tFAIL({})", c.status);
                }
                None => s.push_str("\t-"),
            }
        }
        s.push('\n');
    }
    for (tol, best) in &report.fastest {
        let _ = writeln!(s, "fastest at eps={tol:e}: {}", best.as_deref().unwrap_or("none"));
    }
    s
}

pub(crate) fn cmd_profile(
    problem: Option<&Path>,
    suite: Option<Suite>,
    size: usize,
    dim: usize,
    tolerances: &[f64],
    common: &Common,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let problem = match (problem, suite) {
        (Some(path), _) => load_problem(path).map_err(|e| CliError::new(EXIT_PARSE, e.to_string()))?,
        (None, Some(suite)) => suite.build(size, dim, common.seed),
        (None, None) => return Err(CliError::new(EXIT_PARSE, "profile needs --problem or --suite")),
    };
    let report = run_profile(&problem, &common.solvers(&["active_set", "admm"]), tolerances, &common.settings());
    let text = if common.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report_text(&report, tolerances)
    };
    emit(common, &text, out)?;
    Ok(EXIT_OK)
}
