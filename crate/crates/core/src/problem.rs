//! The quadratic program data model.
//!
//! ```text
//! minimize    ½ zᵀ P z + qᵀ z
//! subject to  A z  = b      (p rows)
//!             C z <= d      (m rows)
//! ```

pub mod io;

use std::fmt;

use thiserror::Error;

use crate::linalg::{minimum_degree, LdlFactor};
use crate::sparse::{CscMatrix, SparseError};

/// Relative tolerance used when checking that `P` is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("{row} has zero norm and cannot be normalized")]
    ZeroRow { row: ConstraintRow },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintRow {
    Equality(usize),
    Inequality(usize),
}

impl fmt::Display for ConstraintRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintRow::Equality(i) => write!(f, "equality row {i}"),
            ConstraintRow::Inequality(i) => write!(f, "inequality row {i}"),
        }
    }
}

/// A strictly convex QP in standard form. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    p: CscMatrix,
    q: Vec<f64>,
    a: CscMatrix,
    b: Vec<f64>,
    c: CscMatrix,
    d: Vec<f64>,
}

impl QpProblem {
    /// Checks that every block has consistent dimensions. Semantic defects
    /// (asymmetry, empty rows, indefiniteness) are left to [`validate`].
    pub fn new(
        p: CscMatrix,
        q: Vec<f64>,
        a: CscMatrix,
        b: Vec<f64>,
        c: CscMatrix,
        d: Vec<f64>,
    ) -> Result<Self, ProblemError> {
        let n = q.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(ProblemError::Dimension(format!(
                "P is {}x{} but q has length {n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if a.ncols() != n || a.nrows() != b.len() {
            return Err(ProblemError::Dimension(format!(
                "A is {}x{}, expected {}x{n}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if c.ncols() != n || c.nrows() != d.len() {
            return Err(ProblemError::Dimension(format!(
                "C is {}x{}, expected {}x{n}",
                c.nrows(),
                c.ncols(),
                d.len()
            )));
        }
        for (name, v) in [("q", &q), ("b", &b), ("d", &d)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ProblemError::NonFinite(name));
            }
        }
        Ok(Self { p, q, a, b, c, d })
    }

    /// Problem without any constraints.
    pub fn unconstrained(p: CscMatrix, q: Vec<f64>) -> Result<Self, ProblemError> {
        let n = q.len();
        Self::new(p, q, CscMatrix::zeros(0, n), vec![], CscMatrix::zeros(0, n), vec![])
    }

    pub fn p(&self) -> &CscMatrix {
        &self.p
    }
    pub fn q(&self) -> &[f64] {
        &self.q
    }
    pub fn a(&self) -> &CscMatrix {
        &self.a
    }
    pub fn b(&self) -> &[f64] {
        &self.b
    }
    pub fn c(&self) -> &CscMatrix {
        &self.c
    }
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Number of variables.
    pub fn n(&self) -> usize {
        self.q.len()
    }
    /// Number of equality rows.
    pub fn n_eq(&self) -> usize {
        self.b.len()
    }
    /// Number of inequality rows.
    pub fn n_ineq(&self) -> usize {
        self.d.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n(), self.n_eq(), self.n_ineq())
    }

    pub fn into_parts(self) -> (CscMatrix, Vec<f64>, CscMatrix, Vec<f64>, CscMatrix, Vec<f64>) {
        (self.p, self.q, self.a, self.b, self.c, self.d)
    }

    pub fn with_q(&self, q: Vec<f64>) -> Result<Self, ProblemError> {
        let s = self.clone();
        Self::new(s.p, q, s.a, s.b, s.c, s.d)
    }

    pub fn with_b(&self, b: Vec<f64>) -> Result<Self, ProblemError> {
        let s = self.clone();
        Self::new(s.p, s.q, s.a, b, s.c, s.d)
    }

    pub fn with_d(&self, d: Vec<f64>) -> Result<Self, ProblemError> {
        let s = self.clone();
        Self::new(s.p, s.q, s.a, s.b, s.c, d)
    }

    pub fn with_matrices(&self, p: CscMatrix, a: CscMatrix, c: CscMatrix) -> Result<Self, ProblemError> {
        let s = self.clone();
        Self::new(p, s.q, a, s.b, c, s.d)
    }

    /// `½ zᵀPz + qᵀz`
    pub fn objective(&self, z: &[f64]) -> f64 {
        let pz = self.p.mul_vec(z);
        0.5 * dot(z, &pz) + dot(&self.q, z)
    }

    /// `Cz − d`
    pub fn inequality_residuals(&self, z: &[f64]) -> Vec<f64> {
        let mut r = self.c.mul_vec(z);
        for (ri, di) in r.iter_mut().zip(&self.d) {
            *ri -= di;
        }
        r
    }

    /// `Az − b`
    pub fn equality_residuals(&self, z: &[f64]) -> Vec<f64> {
        let mut r = self.a.mul_vec(z);
        for (ri, bi) in r.iter_mut().zip(&self.b) {
            *ri -= bi;
        }
        r
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub symmetric: bool,
    /// `None` when the check was not requested.
    pub positive_definite: Option<bool>,
    pub empty_rows: Vec<ConstraintRow>,
    pub messages: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.symmetric && self.positive_definite != Some(false) && self.empty_rows.is_empty()
    }
}

/// Reports structural defects of `problem`. Never fails.
///
/// With `check_pd`, an `LDLᵀ` factorization of `P` is attempted and
/// positive definiteness means every pivot is positive.
pub fn validate(problem: &QpProblem, check_pd: bool) -> ValidationReport {
    let mut messages = Vec::new();
    let symmetric = problem.p.is_symmetric(SYMMETRY_TOL);
    if !symmetric {
        messages.push("P is not symmetric".to_string());
    }
    let mut empty_rows = Vec::new();
    for (i, &cnt) in problem.a.row_counts().iter().enumerate() {
        if cnt == 0 {
            empty_rows.push(ConstraintRow::Equality(i));
        }
    }
    for (i, &cnt) in problem.c.row_counts().iter().enumerate() {
        if cnt == 0 {
            empty_rows.push(ConstraintRow::Inequality(i));
        }
    }
    for row in &empty_rows {
        messages.push(format!("{row} is structurally empty"));
    }
    let positive_definite = check_pd.then(|| {
        let pd = symmetric && is_positive_definite(&problem.p);
        if !pd {
            messages.push("P is not positive definite".to_string());
        }
        pd
    });
    ValidationReport {
        symmetric,
        positive_definite,
        empty_rows,
        messages,
    }
}

fn is_positive_definite(p: &CscMatrix) -> bool {
    let n = p.nrows();
    if n == 0 {
        return true;
    }
    let diag_max = (0..n).map(|i| p.get(i, i).unwrap_or(0.0).abs()).fold(0.0, f64::max);
    if diag_max == 0.0 {
        return false;
    }
    let perm = minimum_degree(p, None);
    match LdlFactor::factorize(p, Some(&perm), 1e-14 * diag_max) {
        Ok(f) => f.positive_pivots() == n,
        Err(_) => false,
    }
}

/// Positive per-row factors that undo [`normalize_constraints`].
#[derive(Debug, Clone, PartialEq)]
pub struct RowScaling {
    pub equality: Vec<f64>,
    pub inequality: Vec<f64>,
}

impl RowScaling {
    pub fn identity(p: usize, m: usize) -> Self {
        Self {
            equality: vec![1.0; p],
            inequality: vec![1.0; m],
        }
    }

    /// Multiplies the rows back, recovering the problem that was normalized.
    pub fn restore(&self, normalized: &QpProblem) -> QpProblem {
        let a = normalized.a.scale_rows(&self.equality);
        let c = normalized.c.scale_rows(&self.inequality);
        let b = mul_elementwise(&normalized.b, &self.equality);
        let d = mul_elementwise(&normalized.d, &self.inequality);
        QpProblem {
            p: normalized.p.clone(),
            q: normalized.q.clone(),
            a,
            b,
            c,
            d,
        }
    }
}

fn mul_elementwise(v: &[f64], s: &[f64]) -> Vec<f64> {
    v.iter().zip(s).map(|(a, b)| a * b).collect()
}

/// Norms this close to one are treated as exactly one, which makes
/// normalization idempotent in floating point.
const UNIT_SNAP: f64 = 1e-14;

/// Divides every constraint row (and its right-hand side) by the row's
/// Euclidean norm. The objective is untouched.
pub fn normalize_constraints(problem: &QpProblem) -> Result<(QpProblem, RowScaling), ProblemError> {
    let scales = |m: &CscMatrix, kind: fn(usize) -> ConstraintRow| -> Result<Vec<f64>, ProblemError> {
        m.row_norms()
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if s == 0.0 || !s.is_finite() {
                    Err(ProblemError::ZeroRow { row: kind(i) })
                } else if (s - 1.0).abs() <= UNIT_SNAP {
                    Ok(1.0)
                } else {
                    Ok(s)
                }
            })
            .collect()
    };
    let eq = scales(&problem.a, ConstraintRow::Equality)?;
    let ineq = scales(&problem.c, ConstraintRow::Inequality)?;
    let div = |v: &[f64], s: &[f64]| v.iter().zip(s).map(|(a, b)| a / b).collect::<Vec<_>>();
    // Divide rather than multiply by the reciprocal so that 3/5 is exactly 0.6.
    let a = problem.a.with_values(
        problem
            .a
            .iter()
            .map(|(i, _, v)| v / eq[i])
            .collect(),
    );
    let c = problem.c.with_values(
        problem
            .c
            .iter()
            .map(|(i, _, v)| v / ineq[i])
            .collect(),
    );
    let normalized = QpProblem {
        p: problem.p.clone(),
        q: problem.q.clone(),
        a,
        b: div(&problem.b, &eq),
        c,
        d: div(&problem.d, &ineq),
    };
    Ok((
        normalized,
        RowScaling {
            equality: eq,
            inequality: ineq,
        },
    ))
}
