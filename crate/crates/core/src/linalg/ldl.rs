//! Sparse `LDLᵀ` factorization without pivoting (up-looking, elimination-tree
//! based, in the style of QDLDL).
//!
//! Only the upper triangle of the input is read. Symmetric permutations are
//! applied up front; the numeric phase never reorders.

use thiserror::Error;

use super::ordering::invert;
use crate::sparse::CscMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdlError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("pivot {value:e} at elimination step {step} is below the threshold {threshold:e}")]
    TinyPivot {
        step: usize,
        value: f64,
        threshold: f64,
    },
    #[error("permutation has length {got}, expected {expected}")]
    BadPermutation { got: usize, expected: usize },
}

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
}

impl LdlFactor {
    /// Factorizes `P A Pᵀ = L D Lᵀ` where `perm[k]` is the original index
    /// placed at position `k`. Any pivot with `|d| <= pivot_tol` aborts.
    pub fn factorize(a: &CscMatrix, perm: Option<&[usize]>, pivot_tol: f64) -> Result<Self, LdlError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LdlError::NotSquare {
                rows: n,
                cols: a.ncols(),
            });
        }
        let perm: Vec<usize> = match perm {
            Some(p) if p.len() != n => {
                return Err(LdlError::BadPermutation {
                    got: p.len(),
                    expected: n,
                })
            }
            Some(p) => p.to_vec(),
            None => (0..n).collect(),
        };
        let iperm = invert(&perm);
        let upper = permuted_upper(a, &iperm);
        let (bp, bi, bx) = (upper.colptr(), upper.rowval(), upper.values());

        // Elimination tree and column counts.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &row in &bi[bp[j]..bp[j + 1]] {
                let mut i = row;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }

        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        let mut li = vec![0usize; total];
        let mut lx = vec![0.0f64; total];
        let mut d = vec![0.0f64; n];
        let mut dinv = vec![0.0f64; n];

        let mut y_vals = vec![0.0f64; n];
        let mut y_idx = vec![0usize; n];
        let mut marked = vec![false; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = lp[..n].to_vec();

        for k in 0..n {
            let mut nnz_y = 0;
            for p in bp[k]..bp[k + 1] {
                let bidx = bi[p];
                if bidx == k {
                    d[k] = bx[p];
                    continue;
                }
                y_vals[bidx] = bx[p];
                if marked[bidx] {
                    continue;
                }
                marked[bidx] = true;
                elim[0] = bidx;
                let mut nnz_e = 1;
                let mut next = etree[bidx];
                while next != NONE && next < k {
                    if marked[next] {
                        break;
                    }
                    marked[next] = true;
                    elim[nnz_e] = next;
                    nnz_e += 1;
                    next = etree[next];
                }
                while nnz_e > 0 {
                    nnz_e -= 1;
                    y_idx[nnz_y] = elim[nnz_e];
                    nnz_y += 1;
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let slot = next_space[c];
                let yc = y_vals[c];
                for j in lp[c]..slot {
                    y_vals[li[j]] -= lx[j] * yc;
                }
                li[slot] = k;
                lx[slot] = yc * dinv[c];
                d[k] -= yc * lx[slot];
                next_space[c] += 1;
                y_vals[c] = 0.0;
                marked[c] = false;
            }
            if !(d[k].abs() > pivot_tol) {
                return Err(LdlError::TinyPivot {
                    step: k,
                    value: d[k],
                    threshold: pivot_tol,
                });
            }
            dinv[k] = 1.0 / d[k];
        }

        Ok(Self {
            n,
            perm,
            lp,
            li,
            lx,
            d,
            dinv,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.lx.len()
    }

    /// Number of strictly positive pivots.
    pub fn positive_pivots(&self) -> usize {
        self.d.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&v| v < 0.0).count()
    }

    pub fn pivots(&self) -> &[f64] {
        &self.d
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "rhs length mismatch");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..self.n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for (xi, di) in x.iter_mut().zip(&self.dinv) {
            *xi *= di;
        }
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                s -= self.lx[j] * x[self.li[j]];
            }
            x[i] = s;
        }
        let mut out = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }
}

/// Upper triangle of `P A Pᵀ` with `iperm[old] = new`.
fn permuted_upper(a: &CscMatrix, iperm: &[usize]) -> CscMatrix {
    let n = a.nrows();
    let mut trip = Vec::with_capacity(a.nnz());
    for (i, j, v) in a.iter() {
        if i > j {
            continue;
        }
        let (ni, nj) = (iperm[i], iperm[j]);
        trip.push((ni.min(nj), ni.max(nj), v));
    }
    CscMatrix::from_triplets(n, n, &trip).expect("permutation preserves uniqueness")
}
