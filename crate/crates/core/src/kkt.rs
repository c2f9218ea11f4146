//! Reduced KKT systems
//!
//! ```text
//!        ┌ P   Aᵀ  C_Jᵀ ┐
//! K_J =  │ A   0   0    │
//!        └ C_J 0   0    ┘
//! ```
//!
//! built from the primal block and the active inequality rows, factorized
//! once and reused for every right-hand side. Singular systems switch to a
//! minimum-norm least-squares solve instead of failing.

use std::cell::Cell;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{minimum_degree, LdlFactor, NodeKind, PseudoInverse};
use crate::problem::QpProblem;
use crate::sparse::CscMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KktError {
    #[error("active index {index} out of range for {m} inequality rows")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("active indices must be strictly increasing")]
    Unsorted,
    #[error("right-hand side has length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// Relative pivot threshold against the largest diagonal magnitude.
pub const PIVOT_RTOL: f64 = 1e-12;
/// Orders above this use regularized normal equations in least-squares mode.
pub const DENSE_LSQ_MAX_ORDER: usize = 2000;
/// Tikhonov shift for the normal-equation path.
pub const NORMAL_EQ_SHIFT: f64 = 1e-10;
const REFINEMENT_STEPS: usize = 2;

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of KKT factorizations performed on the current thread.
pub fn factorization_count() -> usize {
    FACTORIZATIONS.with(Cell::get)
}

fn bump_counter() {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedKkt {
    matrix: CscMatrix,
    n: usize,
    p: usize,
    active: Vec<usize>,
}

impl ReducedKkt {
    /// The full symmetric matrix (both triangles stored).
    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_eq(&self) -> usize {
        self.p
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    fn kinds(&self) -> Vec<NodeKind> {
        (0..self.order())
            .map(|i| if i < self.n { NodeKind::Primal } else { NodeKind::Constraint })
            .collect()
    }
}

/// Places `P`, `A` and the rows of `C` listed in `active` into `K_J`.
pub fn assemble_reduced_kkt(problem: &QpProblem, active: &[usize]) -> Result<ReducedKkt, KktError> {
    let m = problem.n_ineq();
    if let Some(&index) = active.iter().find(|&&j| j >= m) {
        return Err(KktError::IndexOutOfRange { index, m });
    }
    if active.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KktError::Unsorted);
    }
    let (n, p) = (problem.n(), problem.n_eq());
    let order = n + p + active.len();
    let mut trip = Vec::with_capacity(problem.p().nnz() + 2 * problem.a().nnz() + 2 * problem.c().nnz());
    trip.extend(problem.p().iter());
    for (i, j, v) in problem.a().iter() {
        trip.push((n + i, j, v));
        trip.push((j, n + i, v));
    }
    let mut slot = vec![usize::MAX; m];
    for (k, &j) in active.iter().enumerate() {
        slot[j] = k;
    }
    for (i, j, v) in problem.c().iter() {
        if slot[i] != usize::MAX {
            let r = n + p + slot[i];
            trip.push((r, j, v));
            trip.push((j, r, v));
        }
    }
    let matrix = CscMatrix::from_triplets(order, order, &trip).expect("blocks do not overlap");
    Ok(ReducedKkt {
        matrix,
        n,
        p,
        active: active.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMode {
    Direct,
    LeastSquares,
}

#[derive(Debug, Clone)]
enum Solver {
    Ldl(LdlFactor),
    Pseudo(PseudoInverse),
    /// Factor of `K² + shift·I`.
    Normal(LdlFactor),
}

#[derive(Debug, Clone)]
pub struct KktFactorization {
    kkt: ReducedKkt,
    solver: Solver,
    inertia: Option<(usize, usize)>,
    rank: Option<usize>,
    failure: Option<String>,
}

/// Attempts `LDLᵀ` of `K_J` (with `-regularization` on the constraint
/// diagonal) and falls back to least squares when a pivot is tiny or the
/// inertia is not `(n, p + |J|)`.
pub fn factorize(kkt: ReducedKkt, regularization: f64) -> KktFactorization {
    bump_counter();
    factorize_uncounted(kkt, regularization)
}

/// [`factorize`] without touching the factorization counter, for solves
/// internal to a backend.
pub(crate) fn factorize_uncounted(kkt: ReducedKkt, regularization: f64) -> KktFactorization {
    let n = kkt.n;
    let order = kkt.order();
    let target = if regularization > 0.0 {
        let diag: Vec<f64> = (0..order)
            .map(|i| if i < n { 0.0 } else { -regularization })
            .collect();
        kkt.matrix.add(&CscMatrix::diagonal(&diag))
    } else {
        kkt.matrix.clone()
    };
    let diag_max = (0..order)
        .map(|i| kkt.matrix.get(i, i).unwrap_or(0.0).abs())
        .fold(0.0, f64::max);
    let tol = PIVOT_RTOL * if diag_max > 0.0 { diag_max } else { 1.0 };
    let kinds = kkt.kinds();
    let perm = minimum_degree(&target, Some(&kinds));
    let failure = match LdlFactor::factorize(&target, Some(&perm), tol) {
        Ok(f) => {
            let inertia = (f.positive_pivots(), f.negative_pivots());
            if inertia == (n, order - n) {
                return KktFactorization {
                    kkt,
                    solver: Solver::Ldl(f),
                    inertia: Some(inertia),
                    rank: Some(order),
                    failure: None,
                };
            }
            format!("inertia {inertia:?}, expected ({n}, {})", order - n)
        }
        Err(e) => e.to_string(),
    };
    log::debug!("reduced KKT factorization failed ({failure}); using least squares");
    least_squares_with(kkt, Some(failure))
}

/// Least-squares mode regardless of whether `K_J` is invertible.
pub fn factorize_least_squares(kkt: ReducedKkt) -> KktFactorization {
    bump_counter();
    least_squares_with(kkt, None)
}

fn least_squares_with(kkt: ReducedKkt, failure: Option<String>) -> KktFactorization {
    let order = kkt.order();
    if order <= DENSE_LSQ_MAX_ORDER {
        let pinv = PseudoInverse::new(&kkt.matrix.to_dense());
        let rank = pinv.rank();
        return KktFactorization {
            kkt,
            solver: Solver::Pseudo(pinv),
            inertia: None,
            rank: Some(rank),
            failure,
        };
    }
    let k2 = kkt.matrix.matmul(&kkt.matrix);
    let scale = (0..order).map(|i| k2.get(i, i).unwrap_or(0.0)).fold(0.0, f64::max).max(1.0);
    let shifted = k2.add(&CscMatrix::diagonal(&vec![NORMAL_EQ_SHIFT * scale; order]));
    let perm = minimum_degree(&shifted, None);
    let f = LdlFactor::factorize(&shifted, Some(&perm), 0.0).expect("shifted normal matrix is positive definite");
    KktFactorization {
        kkt,
        solver: Solver::Normal(f),
        inertia: None,
        rank: None,
        failure,
    }
}

impl KktFactorization {
    pub fn mode(&self) -> FactorMode {
        match self.solver {
            Solver::Ldl(_) => FactorMode::Direct,
            _ => FactorMode::LeastSquares,
        }
    }

    pub fn kkt(&self) -> &ReducedKkt {
        &self.kkt
    }

    pub fn order(&self) -> usize {
        self.kkt.order()
    }

    /// `(positive, negative)` pivot counts in direct mode.
    pub fn inertia(&self) -> Option<(usize, usize)> {
        self.inertia
    }

    /// Numerical rank when known.
    pub fn rank(&self) -> Option<usize> {
        self.rank
    }

    /// Why the direct factorization was rejected, if it was attempted.
    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    /// `K_J⁻¹ rhs` in direct mode, the minimum-norm least-squares solution
    /// otherwise. `K_J` is symmetric so this also serves transposed solves.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, KktError> {
        if rhs.len() != self.order() {
            return Err(KktError::LengthMismatch {
                got: rhs.len(),
                expected: self.order(),
            });
        }
        Ok(match &self.solver {
            Solver::Ldl(f) => self.refine(f, rhs),
            Solver::Pseudo(p) => p.solve(rhs),
            Solver::Normal(f) => f.solve(&self.kkt.matrix.mul_vec(rhs)),
        })
    }

    fn refine(&self, f: &LdlFactor, rhs: &[f64]) -> Vec<f64> {
        let mut x = f.solve(rhs);
        let mut res = residual(&self.kkt.matrix, &x, rhs);
        let mut norm = inf_norm(&res);
        for _ in 0..REFINEMENT_STEPS {
            if norm == 0.0 {
                break;
            }
            let dx = f.solve(&res);
            let cand: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let cres = residual(&self.kkt.matrix, &cand, rhs);
            let cnorm = inf_norm(&cres);
            if cnorm >= norm {
                break;
            }
            x = cand;
            res = cres;
            norm = cnorm;
        }
        x
    }

    /// Dense copy of `K_J` used for conditioning reports.
    pub fn dense(&self) -> DMatrix<f64> {
        self.kkt.matrix.to_dense()
    }
}

fn residual(k: &CscMatrix, x: &[f64], rhs: &[f64]) -> Vec<f64> {
    let kx = k.mul_vec(x);
    rhs.iter().zip(&kx).map(|(r, v)| r - v).collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_d() -> QpProblem {
        QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::zeros(0, 1),
            vec![],
            CscMatrix::from_rows(&[&[1.0]]),
            vec![-1.0],
        )
        .unwrap()
    }

    #[test]
    fn one_d_block_placement() {
        let k = assemble_reduced_kkt(&one_d(), &[0]).unwrap();
        assert_eq!(k.matrix().to_dense(), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn empty_active_set_is_p() {
        let prob = one_d();
        let k = assemble_reduced_kkt(&prob, &[]).unwrap();
        assert_eq!(k.matrix(), prob.p());
    }

    #[test]
    fn two_d_block_placement() {
        let prob = QpProblem::new(
            CscMatrix::identity(2),
            vec![0.0; 2],
            CscMatrix::zeros(0, 2),
            vec![],
            CscMatrix::from_rows(&[&[-1.0, -1.0]]),
            vec![-1.0],
        )
        .unwrap();
        let k = assemble_reduced_kkt(&prob, &[0]).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -1.0, 0.0, 1.0, -1.0, -1.0, -1.0, 0.0]);
        assert_eq!(k.matrix().to_dense(), expected);
    }

    #[test]
    fn out_of_range_index() {
        assert_eq!(
            assemble_reduced_kkt(&one_d(), &[1]),
            Err(KktError::IndexOutOfRange { index: 1, m: 1 })
        );
    }

    #[test]
    fn two_by_two_direct() {
        let f = factorize(assemble_reduced_kkt(&one_d(), &[0]).unwrap(), 0.0);
        assert_eq!(f.mode(), FactorMode::Direct);
        assert_eq!(f.solve(&[0.0, 1.0]).unwrap(), vec![1.0, -1.0]);
    }

    fn duplicated_row() -> ReducedKkt {
        let prob = QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::zeros(0, 1),
            vec![],
            CscMatrix::from_rows(&[&[1.0], &[1.0]]),
            vec![-1.0, -1.0],
        )
        .unwrap();
        assemble_reduced_kkt(&prob, &[0, 1]).unwrap()
    }

    #[test]
    fn rank_deficient_switches_mode() {
        let f = factorize(duplicated_row(), 0.0);
        assert_eq!(f.mode(), FactorMode::LeastSquares);
        assert_eq!(f.rank(), Some(2));
        assert!(f.failure().is_some());
    }

    #[test]
    fn least_squares_is_minimum_norm() {
        // Independent oracle: the pseudoinverse from the dense SVD via
        // nalgebra's own routine.
        let kkt = duplicated_row();
        let dense = kkt.matrix().to_dense();
        let f = factorize(kkt, 0.0);
        let rhs = [0.3, -1.0, -1.0];
        let x = f.solve(&rhs).unwrap();
        let pinv = dense.clone().pseudo_inverse(1e-12).unwrap();
        let expected = pinv * nalgebra::DVector::from_column_slice(&rhs);
        for (a, b) in x.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{x:?} vs {expected:?}");
        }
    }

    #[test]
    fn length_mismatch() {
        let f = factorize(assemble_reduced_kkt(&one_d(), &[0]).unwrap(), 0.0);
        assert!(matches!(f.solve(&[1.0]), Err(KktError::LengthMismatch { .. })));
    }

    fn random_kkt(seed: u64, n: usize, p: usize, m: usize, active: &[usize]) -> ReducedKkt {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let pm = &q.transpose() * &q + DMatrix::identity(n, n);
        let a = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let prob = QpProblem::new(
            CscMatrix::from_dense(&pm),
            vec![0.0; n],
            CscMatrix::from_dense(&a),
            vec![0.0; p],
            CscMatrix::from_dense(&c),
            vec![0.0; m],
        )
        .unwrap();
        assemble_reduced_kkt(&prob, active).unwrap()
    }

    #[test]
    fn random_well_conditioned_residual() {
        let kkt = random_kkt(3, 20, 0, 8, &[0, 2, 3, 5, 7]);
        let k = kkt.matrix().clone();
        let f = factorize(kkt, 0.0);
        assert_eq!(f.mode(), FactorMode::Direct);
        let rhs: Vec<f64> = (0..25).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = f.solve(&rhs).unwrap();
        assert!(inf_norm(&residual(&k, &x, &rhs)) <= 1e-9);
    }

    #[test]
    fn inverse_is_symmetric() {
        let f = factorize(random_kkt(5, 6, 2, 4, &[1, 3]), 0.0);
        let order = f.order();
        let cols: Vec<Vec<f64>> = (0..order)
            .map(|i| {
                let mut e = vec![0.0; order];
                e[i] = 1.0;
                f.solve(&e).unwrap()
            })
            .collect();
        for i in 0..order {
            for j in 0..order {
                assert!((cols[i][j] - cols[j][i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn counter_tracks_factorizations() {
        let before = factorization_count();
        let _ = factorize(assemble_reduced_kkt(&one_d(), &[0]).unwrap(), 0.0);
        let _ = factorize_least_squares(assemble_reduced_kkt(&one_d(), &[0]).unwrap());
        assert_eq!(factorization_count() - before, 2);
    }

    #[test]
    fn normal_equation_path_solves_consistent_system() {
        // Exercise the large-order branch directly on a small system.
        let kkt = random_kkt(9, 8, 1, 3, &[0, 2]);
        let k = kkt.matrix().clone();
        let order = kkt.order();
        let fact = {
            bump_counter();
            let k2 = kkt.matrix.matmul(&kkt.matrix);
            let shifted = k2.add(&CscMatrix::diagonal(&vec![1e-14; order]));
            let f = LdlFactor::factorize(&shifted, None, 0.0).unwrap();
            KktFactorization {
                kkt,
                solver: Solver::Normal(f),
                inertia: None,
                rank: None,
                failure: None,
            }
        };
        let x_true: Vec<f64> = (0..order).map(|i| i as f64 - 3.0).collect();
        let rhs = k.mul_vec(&x_true);
        let x = fact.solve(&rhs).unwrap();
        for (a, b) in x.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn regularized_factorization_refines_to_exact() {
        let kkt = random_kkt(13, 10, 2, 4, &[0, 1, 3]);
        let k = kkt.matrix().clone();
        let f = factorize(kkt, 1e-11);
        assert_eq!(f.mode(), FactorMode::Direct);
        let rhs: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&rhs).unwrap();
        assert!(inf_norm(&residual(&k, &x, &rhs)) <= 1e-10);
    }
}
