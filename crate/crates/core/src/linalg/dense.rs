//! Dense helpers: condition estimation and minimum-norm least squares.

use nalgebra::{DMatrix, DVector, LU, SVD};

/// 1-norm condition number estimate `‖M‖₁ · est(‖M⁻¹‖₁)`.
///
/// The inverse norm comes from Hager's power iteration on the sign vector
/// (with Higham's alternating-vector safeguard), using one LU of `M` and one
/// of `Mᵀ`. Returns `+∞` when `M` is exactly singular.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "condition estimate needs a square matrix");
    let n = m.nrows();
    if n == 0 {
        return 1.0;
    }
    let lu = LU::new(m.clone());
    if !lu.is_invertible() || has_zero_pivot(&lu) {
        return f64::INFINITY;
    }
    let lut = LU::new(m.transpose());
    let solve = |lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>, v: &DVector<f64>| lu.solve(v);

    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0f64;
    for iter in 0..5 {
        let Some(y) = solve(&lu, &x) else {
            return f64::INFINITY;
        };
        estimate = y.iter().map(|v| v.abs()).sum();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = solve(&lut, &xi) else {
            return f64::INFINITY;
        };
        let (jmax, zmax) = z
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bj, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bj, bv) });
        if iter > 0 && zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[jmax] = 1.0;
    }
    let alt = DVector::from_fn(n, |i, _| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
    });
    if let Some(y) = solve(&lu, &alt) {
        let alt_est = 2.0 * y.iter().map(|v| v.abs()).sum::<f64>() / (3.0 * n as f64);
        estimate = estimate.max(alt_est);
    }
    let est = one_norm(m) * estimate;
    if est.is_finite() {
        est
    } else {
        f64::INFINITY
    }
}

fn has_zero_pivot(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let u = lu.u();
    (0..u.nrows()).any(|i| u[(i, i)] == 0.0)
}

/// Maximum absolute column sum.
pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Truncated-SVD pseudoinverse handle for repeated minimum-norm solves.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cutoff: f64,
    rank: usize,
}

impl PseudoInverse {
    /// Singular values below `max(σ) · max(rows, cols) · ε` are discarded.
    pub fn new(m: &DMatrix<f64>) -> Self {
        let svd = SVD::new(m.clone(), true, true);
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
        let cutoff = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        Self { svd, cutoff, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(rhs);
        let u = self.svd.u.as_ref().expect("computed with U");
        let vt = self.svd.v_t.as_ref().expect("computed with Vᵀ");
        let mut coeff = u.transpose() * b;
        for (c, &s) in coeff.iter_mut().zip(self.svd.singular_values.iter()) {
            *c = if s > self.cutoff { *c / s } else { 0.0 };
        }
        (vt.transpose() * coeff).as_slice().to_vec()
    }
}

/// Exact 2-norm condition number from the singular values.
pub fn spectral_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    let min = sv.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
