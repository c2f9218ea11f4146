//! Toy bi-level problem: minimize `‖μ*(θ)‖²` over `d(θ) = d₀ + θ` by
//! gradient descent through the inner QP.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{diff_error, emit, CliError, Common, EXIT_CHECK_FAILED, EXIT_OK, EXIT_PARSE};
use crate::diff::{dqp_solve_named, DiffError, DifferentiableSolution, DqpOptions, FixedMask};
use crate::problem::io::load_problem;
use crate::problem::QpProblem;
use crate::solvers::{Registry, SolveSettings};
use crate::sparse::CscMatrix;

pub const DEFAULT_STEP: f64 = 1e-2;
/// Descent gives up once halving drives the step below this.
pub const MIN_STEP: f64 = 1e-12;

/// `min 8‖z − 1‖²` s.t. `z₁ ≤ 0.5`, `z₂ ≤ 0.5`, `z₁ + z₂ ≤ 1.5`. The two
/// bounds start active; freeing them activates the coupling row, which a
/// second step frees as well.
pub fn toy_instance() -> QpProblem {
    QpProblem::new(
        CscMatrix::diagonal(&[16.0, 16.0]),
        vec![-16.0, -16.0],
        CscMatrix::zeros(0, 2),
        vec![],
        CscMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]),
        vec![0.5, 0.5, 1.5],
    )
    .expect("toy instance is well formed")
}

#[derive(Debug, Clone)]
pub struct BilevelConfig {
    pub template: QpProblem,
    pub step: f64,
    pub max_iter: usize,
    pub target: f64,
    pub warm_start: bool,
    pub backend: String,
    pub settings: SolveSettings,
    pub options: DqpOptions,
}

impl BilevelConfig {
    pub fn new(template: QpProblem) -> Self {
        Self {
            template,
            step: DEFAULT_STEP,
            max_iter: 1000,
            target: 1e-10,
            warm_start: false,
            backend: "active_set".into(),
            settings: SolveSettings::default(),
            options: DqpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BilevelIteration {
    pub iter: usize,
    pub loss: f64,
    pub active: Vec<usize>,
    /// The active set differs from the previous iteration.
    pub changed: bool,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BilevelReport {
    pub log: Vec<BilevelIteration>,
    pub theta: Vec<f64>,
    pub final_active: Vec<usize>,
    pub final_loss: f64,
    pub halvings: usize,
    pub converged: bool,
}

fn loss(sol: &DifferentiableSolution) -> f64 {
    sol.mu().iter().map(|m| m * m).sum()
}

pub fn run_bilevel(config: &BilevelConfig) -> Result<BilevelReport, DiffError> {
    if !(config.step > 0.0) {
        return Err(DiffError::Shape("step size must be positive".into()));
    }
    let registry = Registry::with_defaults();
    let d0 = config.template.d().to_vec();
    let solve_at = |theta: &[f64], warm: Option<&DifferentiableSolution>| {
        let d = d0.iter().zip(theta).map(|(a, b)| a + b).collect();
        let problem = config.template.with_d(d)?;
        let settings = SolveSettings {
            warm_start: warm.filter(|_| config.warm_start).map(|s| s.point().clone()),
            ..config.settings.clone()
        };
        dqp_solve_named(&problem, &registry, &config.backend, &settings, &config.options)
    };
    let mut theta = vec![0.0; d0.len()];
    let mut sol = solve_at(&theta, None)?;
    let mut current = loss(&sol);
    let mut step = config.step;
    let mut halvings = 0;
    let mut log = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut converged = false;
    for iter in 0..=config.max_iter {
        let active = sol.active().indices().to_vec();
        let changed = previous.as_ref().is_some_and(|p| *p != active);
        log::debug!("iter {iter} loss {current:.3e} |J| {}", active.len());
        log.push(BilevelIteration {
            iter,
            loss: current,
            active: active.clone(),
            changed,
            step,
        });
        previous = Some(active);
        if current <= config.target {
            converged = true;
            break;
        }
        if iter == config.max_iter {
            break;
        }
        let grad_mu: Vec<f64> = sol.mu().iter().map(|m| 2.0 * m).collect();
        let zero = vec![0.0; sol.problem().n()];
        let grads = sol.backward(&zero, None, Some(&grad_mu), FixedMask::all_except(&["d"]))?;
        let grad = grads.grad_d.expect("d is free");
        loop {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let next = solve_at(&trial, Some(&sol))?;
            let next_loss = loss(&next);
            if next_loss <= current {
                theta = trial;
                sol = next;
                current = next_loss;
                break;
            }
            step *= 0.5;
            halvings += 1;
            if step < MIN_STEP {
                break;
            }
        }
        if step < MIN_STEP {
            break;
        }
    }
    Ok(BilevelReport {
        log,
        theta,
        final_active: sol.active().indices().to_vec(),
        final_loss: current,
        halvings,
        converged,
    })
}

pub fn report_text(report: &BilevelReport) -> String {
    let mut s = String::new();
    for it in &report.log {
        let _ = writeln!(
            s,
            "iter {:4}  loss {:.6e}  |J| {}  step {:.3e}{}",
            it.iter,
            it.loss,
            it.active.len(),
            it.step,
            if it.changed { "  active set changed" } else { "" }
        );
    }
    let list = report.theta.iter().map(|t| format!("{t}")).collect::<Vec<_>>().join(", ");
    let _ = writeln!(s, "theta = [{list}]");
    let _ = writeln!(s, "final J = {:?}, halvings = {}", report.final_active, report.halvings);
    let _ = writeln!(s, "{}", if report.converged { "converged" } else { "not converged" });
    s
}

pub(crate) fn cmd_bilevel(
    problem: Option<&Path>,
    step: f64,
    max_iter: usize,
    target: f64,
    warm_start: bool,
    common: &Common,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let template = match problem {
        Some(path) => load_problem(path).map_err(|e| CliError::new(EXIT_PARSE, e.to_string()))?,
        None => toy_instance(),
    };
    let config = BilevelConfig {
        step,
        max_iter,
        target,
        warm_start,
        backend: common.solvers(&["active_set"]).remove(0),
        settings: common.settings(),
        options: common.options(),
        ..BilevelConfig::new(template)
    };
    let report = run_bilevel(&config).map_err(diff_error)?;
    let text = if common.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report_text(&report)
    };
    emit(common, &text, out)?;
    Ok(if report.converged { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::brute_force_solve;

    #[test]
    fn toy_reaches_target_with_rows_freed() {
        let report = run_bilevel(&BilevelConfig::new(toy_instance())).unwrap();
        assert!(report.log[0].loss > 0.0);
        assert!(report.converged, "{}", report_text(&report));
        assert!(report.final_loss <= 1e-10);
        assert!(report.final_active.is_empty());
        let d: Vec<f64> = toy_instance().d().iter().zip(&report.theta).map(|(a, b)| a + b).collect();
        let pt = brute_force_solve(&toy_instance().with_d(d).unwrap()).unwrap();
        assert!(pt.mu.unwrap().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn loss_non_increasing() {
        let report = run_bilevel(&BilevelConfig::new(toy_instance())).unwrap();
        for w in report.log.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn already_inactive_stops_at_zero() {
        let loose = toy_instance().with_d(vec![5.0, 5.0, 5.0]).unwrap();
        let report = run_bilevel(&BilevelConfig::new(loose)).unwrap();
        assert_eq!(report.log.len(), 1);
        assert_eq!(report.log[0].iter, 0);
        assert!(report.converged);
    }

    #[test]
    fn large_step_still_descends() {
        let config = BilevelConfig {
            step: 10.0,
            ..BilevelConfig::new(toy_instance())
        };
        let report = run_bilevel(&config).unwrap();
        assert!(report.converged);
        for w in report.log.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn warm_start_matches_cold() {
        let cold = run_bilevel(&BilevelConfig::new(toy_instance())).unwrap();
        let warm = run_bilevel(&BilevelConfig {
            warm_start: true,
            ..BilevelConfig::new(toy_instance())
        })
        .unwrap();
        assert_eq!(cold.final_active, warm.final_active);
        assert!(warm.converged);
    }
}
