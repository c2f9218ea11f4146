//! Solver backends and the name registry.
//!
//! Tolerances are absolute ∞-norm bounds on the primal residual
//! `max(‖Az − b‖∞, [Cz − d]₊)` and the stationarity residual
//! `‖Pz + q + Aᵀλ + Cᵀμ‖∞` for every backend.

pub mod active_set;
pub mod admm;
pub mod equality;

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use thiserror::Error;

use crate::problem::QpProblem;

pub use active_set::{solve_active_set, ActiveSetSolver};
pub use admm::{solve_admm, AdmmSettings, AdmmSolver};
pub use equality::{solve_equality_qp, EqualitySolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Solved,
    MaxIter,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualPoint {
    pub z: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub status: SolveStatus,
    pub r_p: f64,
    pub r_d: f64,
    pub iterations: usize,
    /// Inequality rows held at equality when the backend tracks them.
    pub working_set: Option<Vec<usize>>,
}

impl PrimalDualPoint {
    pub fn is_solved(&self) -> bool {
        self.status == SolveStatus::Solved
    }

    pub fn has_duals(&self, problem: &QpProblem) -> bool {
        (self.lambda.is_some() || problem.n_eq() == 0) && (self.mu.is_some() || problem.n_ineq() == 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSettings {
    pub eps_abs: f64,
    pub max_iterations: usize,
    pub warm_start: Option<PrimalDualPoint>,
    pub time_limit: Option<Duration>,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            max_iterations: 100_000,
            warm_start: None,
            time_limit: None,
        }
    }
}

impl SolveSettings {
    pub fn with_eps(eps_abs: f64) -> Self {
        Self {
            eps_abs,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), SolverError> {
        if !(self.eps_abs > 0.0) {
            return Err(SolverError::InvalidSettings(format!("eps_abs must be positive, got {}", self.eps_abs)));
        }
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidSettings("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub returns_duals: bool,
    pub supports_sparse: bool,
    pub supports_warm_start: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("{backend} cannot handle this problem: {reason}")]
    Unsupported { backend: String, reason: String },
    #[error("KKT matrix is rank deficient: {0}")]
    RankDeficient(String),
}

pub trait SolverBackend: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    /// Iteration limits and non-convergence are reported through the
    /// status of the returned point; errors are for unusable inputs.
    fn solve(&self, problem: &QpProblem, settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError>;
}

/// Hides the duals of another backend, standing in for solvers that only
/// return a primal solution.
pub struct PrimalOnly<B>(pub B);

impl<B: SolverBackend> SolverBackend for PrimalOnly<B> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            returns_duals: false,
            ..self.0.capabilities()
        }
    }

    fn solve(&self, problem: &QpProblem, settings: &SolveSettings) -> Result<PrimalDualPoint, SolverError> {
        let mut point = self.0.solve(problem, settings)?;
        point.lambda = None;
        point.mu = None;
        point.working_set = None;
        Ok(point)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("a backend named {0:?} is already registered")]
    Duplicate(String),
    #[error("unknown backend {name:?} (available: {available})")]
    Unknown { name: String, available: String },
}

#[derive(Default)]
pub struct Registry {
    backends: RwLock<BTreeMap<String, Arc<dyn SolverBackend>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding `active_set`, `admm`, `brute_force` and `equality`.
    pub fn with_defaults() -> Self {
        let r = Self::new();
        r.register("active_set", Arc::new(ActiveSetSolver)).expect("fresh registry");
        r.register("admm", Arc::new(AdmmSolver::default())).expect("fresh registry");
        r.register("brute_force", Arc::new(crate::oracles::BruteForceSolver))
            .expect("fresh registry");
        r.register("equality", Arc::new(EqualitySolver)).expect("fresh registry");
        r
    }

    pub fn register(&self, name: &str, backend: Arc<dyn SolverBackend>) -> Result<(), RegistryError> {
        let mut map = self.backends.write().unwrap_or_else(|e| e.into_inner());
        if map.contains_key(name) {
            return Err(RegistryError::Duplicate(name.to_string()));
        }
        map.insert(name.to_string(), backend);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SolverBackend>, RegistryError> {
        let map = self.backends.read().unwrap_or_else(|e| e.into_inner());
        map.get(name).cloned().ok_or_else(|| RegistryError::Unknown {
            name: name.to_string(),
            available: map.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    /// Registered names in alphabetical order.
    pub fn names(&self) -> Vec<String> {
        let map = self.backends.read().unwrap_or_else(|e| e.into_inner());
        map.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_then_get() {
        let r = Registry::new();
        let backend: Arc<dyn SolverBackend> = Arc::new(ActiveSetSolver);
        r.register("active_set", backend.clone()).unwrap();
        let got = r.get("active_set").unwrap();
        assert!(Arc::ptr_eq(&got, &backend));
    }

    #[test]
    fn unknown_name() {
        let r = Registry::with_defaults();
        assert!(matches!(r.get("nonexistent"), Err(RegistryError::Unknown { .. })));
    }

    #[test]
    fn duplicate_name() {
        let r = Registry::new();
        r.register("x", Arc::new(EqualitySolver)).unwrap();
        assert_eq!(
            r.register("x", Arc::new(EqualitySolver)),
            Err(RegistryError::Duplicate("x".into()))
        );
    }

    #[test]
    fn listing_sorted() {
        let r = Registry::new();
        r.register("equality", Arc::new(EqualitySolver)).unwrap();
        r.register("admm", Arc::new(AdmmSolver::default())).unwrap();
        r.register("active_set", Arc::new(ActiveSetSolver)).unwrap();
        assert_eq!(r.names(), vec!["active_set", "admm", "equality"]);
    }

    #[test]
    fn concurrent_registration() {
        let r = Arc::new(Registry::new());
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let r = Arc::clone(&r);
                std::thread::spawn(move || r.register(&format!("b{i}"), Arc::new(EqualitySolver)))
            })
            .collect();
        for h in handles {
            h.join().unwrap().unwrap();
        }
        assert_eq!(r.names().len(), 8);
    }

    #[test]
    fn invalid_settings_rejected() {
        let s = SolveSettings {
            eps_abs: 0.0,
            ..SolveSettings::default()
        };
        assert!(s.check().is_err());
    }
}
