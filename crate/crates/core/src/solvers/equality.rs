//! Equality-constrained QPs by one saddle-point solve.

use super::{Capabilities, PrimalDualPoint, SolveSettings, SolveStatus, SolverBackend, SolverError};
use crate::kkt::{assemble_reduced_kkt, factorize, FactorMode};
use crate::metrics::{dual_residual, primal_residual};
use crate::problem::QpProblem;
use crate::sparse::CscMatrix;

/// Solves `[[P, Aᵀ], [A, 0]] [z; λ] = [−q; b]`.
pub fn solve_equality_qp(
    p: &CscMatrix,
    q: &[f64],
    a: &CscMatrix,
    b: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    let n = q.len();
    let prob = QpProblem::new(p.clone(), q.to_vec(), a.clone(), b.to_vec(), CscMatrix::zeros(0, n), vec![])
        .map_err(|e| SolverError::Unsupported {
            backend: "equality".into(),
            reason: e.to_string(),
        })?;
    equality_kkt_solve(&prob)
}

fn equality_kkt_solve(prob: &QpProblem) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    let n = prob.n();
    let kkt = assemble_reduced_kkt(prob, &[]).expect("no active rows");
    let fact = factorize(kkt, 0.0);
    if fact.mode() != FactorMode::Direct {
        return Err(SolverError::RankDeficient(
            fact.failure().unwrap_or("least-squares mode").to_string(),
        ));
    }
    let mut rhs: Vec<f64> = prob.q().iter().map(|v| -v).collect();
    rhs.extend_from_slice(prob.b());
    let sol = fact.solve(&rhs).expect("rhs has the KKT order");
    Ok((sol[..n].to_vec(), sol[n..].to_vec()))
}

/// Backend for problems without inequality rows.
pub struct EqualitySolver;

impl SolverBackend for EqualitySolver {
    fn name(&self) -> &str {
        "equality"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            returns_duals: true,
            supports_sparse: true,
            supports_warm_start: false,
        }
    }

    fn solve(&self, problem: &QpProblem, settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError> {
        settings.check()?;
        if problem.n_ineq() > 0 {
            return Err(SolverError::Unsupported {
                backend: "equality".into(),
                reason: format!("{} inequality rows present", problem.n_ineq()),
            });
        }
        let (z, lambda) = equality_kkt_solve(problem)?;
        let r_p = primal_residual(problem, &z);
        let r_d = dual_residual(problem, &z, &lambda, &[]);
        let status = if r_p <= settings.eps_abs && r_d <= settings.eps_abs {
            SolveStatus::Solved
        } else {
            SolveStatus::Failed
        };
        Ok(PrimalDualPoint {
            z,
            lambda: Some(lambda),
            mu: Some(vec![]),
            status,
            r_p,
            r_d,
            iterations: 1,
            working_set: Some(vec![]),
        })
    }
}
