//! Compressed sparse column storage.
//!
//! Row indices inside each column are strictly increasing, so two matrices
//! with the same entries have identical storage and structural equality is a
//! plain field comparison.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("column pointer array has length {got}, expected {expected}")]
    BadColptr { got: usize, expected: usize },
    #[error("row index {row} out of range in column {col} (nrows = {nrows})")]
    RowOutOfRange { row: usize, col: usize, nrows: usize },
    #[error("entry ({row}, {col}) out of range for a {nrows}x{ncols} matrix")]
    EntryOutOfRange {
        row: usize,
        col: usize,
        nrows: usize,
        ncols: usize,
    },
    #[error("row indices of column {col} are not strictly increasing")]
    Unsorted { col: usize },
    #[error("duplicate entry ({row}, {col})")]
    Duplicate { row: usize, col: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("value array length {values} does not match index array length {indices}")]
    LengthMismatch { values: usize, indices: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowval: Vec<usize>,
    nzval: Vec<f64>,
}

impl CscMatrix {
    /// Builds a matrix from raw CSC arrays, checking ordering and bounds.
    pub fn new(
        nrows: usize,
        ncols: usize,
        colptr: Vec<usize>,
        rowval: Vec<usize>,
        nzval: Vec<f64>,
    ) -> Result<Self, SparseError> {
        if colptr.len() != ncols + 1 || colptr[0] != 0 {
            return Err(SparseError::BadColptr {
                got: colptr.len(),
                expected: ncols + 1,
            });
        }
        if rowval.len() != nzval.len() || *colptr.last().unwrap() != rowval.len() {
            return Err(SparseError::LengthMismatch {
                values: nzval.len(),
                indices: rowval.len(),
            });
        }
        for col in 0..ncols {
            let (start, end) = (colptr[col], colptr[col + 1]);
            if start > end {
                return Err(SparseError::BadColptr {
                    got: colptr.len(),
                    expected: ncols + 1,
                });
            }
            for k in start..end {
                let row = rowval[k];
                if row >= nrows {
                    return Err(SparseError::RowOutOfRange { row, col, nrows });
                }
                if k > start && rowval[k - 1] >= row {
                    return Err(if rowval[k - 1] == row {
                        SparseError::Duplicate { row, col }
                    } else {
                        SparseError::Unsorted { col }
                    });
                }
                if !nzval[k].is_finite() {
                    return Err(SparseError::NonFinite { row, col });
                }
            }
        }
        Ok(Self {
            nrows,
            ncols,
            colptr,
            rowval,
            nzval,
        })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowval: Vec::new(),
            nzval: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            colptr: (0..=n).collect(),
            rowval: (0..n).collect(),
            nzval: diag.to_vec(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets in any order.
    /// Duplicates are rejected rather than summed. Explicit zeros are kept
    /// as structural entries.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, SparseError> {
        for &(row, col, v) in triplets {
            if row >= nrows || col >= ncols {
                return Err(SparseError::EntryOutOfRange {
                    row,
                    col,
                    nrows,
                    ncols,
                });
            }
            if !v.is_finite() {
                return Err(SparseError::NonFinite { row, col });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (c, r));
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(SparseError::Duplicate {
                    row: w[0].0,
                    col: w[0].1,
                });
            }
        }
        let mut colptr = vec![0usize; ncols + 1];
        for &(_, c, _) in &sorted {
            colptr[c + 1] += 1;
        }
        for c in 0..ncols {
            colptr[c + 1] += colptr[c];
        }
        let rowval = sorted.iter().map(|t| t.0).collect();
        let nzval = sorted.iter().map(|t| t.2).collect();
        Ok(Self {
            nrows,
            ncols,
            colptr,
            rowval,
            nzval,
        })
    }

    /// Converts a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut colptr = Vec::with_capacity(m.ncols() + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != 0.0 {
                    rowval.push(i);
                    nzval.push(v);
                }
            }
            colptr.push(rowval.len());
        }
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            colptr,
            rowval,
            nzval,
        }
    }

    /// Row-major dense input, convenient for small hand-written matrices.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let m = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
        Self::from_dense(&m)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.nzval.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowval(&self) -> &[usize] {
        &self.rowval
    }

    pub fn values(&self) -> &[f64] {
        &self.nzval
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.nzval
    }

    /// Same structure, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.nnz());
        Self {
            nzval: values,
            ..self.clone()
        }
    }

    /// Entries of column `j` as `(row index, value)` slices.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.colptr[j]..self.colptr[j + 1];
        (&self.rowval[r.clone()], &self.nzval[r])
    }

    /// Iterates `(row, col, value)` in column-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.colptr[j]..self.colptr[j + 1]).map(move |k| (self.rowval[k], j, self.nzval[k]))
        })
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.iter().collect()
    }

    /// Stored value at `(i, j)`, or `None` when the entry is structurally absent.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (rows, vals) = self.col(j);
        rows.binary_search(&i).ok().map(|k| vals[k])
    }

    /// Position of `(i, j)` inside the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (rows, _) = self.col(j);
        rows.binary_search(&i).ok().map(|k| self.colptr[j] + k)
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.nrows + 1];
        for &r in &self.rowval {
            counts[r + 1] += 1;
        }
        for i in 0..self.nrows {
            counts[i + 1] += counts[i];
        }
        let colptr = counts.clone();
        let mut next = counts;
        let mut rowval = vec![0; self.nnz()];
        let mut nzval = vec![0.0; self.nnz()];
        for j in 0..self.ncols {
            for k in self.colptr[j]..self.colptr[j + 1] {
                let r = self.rowval[k];
                let dst = next[r];
                rowval[dst] = j;
                nzval[dst] = self.nzval[k];
                next[r] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            colptr,
            rowval,
            nzval,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "mul_vec dimension mismatch");
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for k in self.colptr[j]..self.colptr[j + 1] {
                y[self.rowval[k]] += self.nzval[k] * xj;
            }
        }
        y
    }

    /// `y = Aᵀ x`
    pub fn tmul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "tmul_vec dimension mismatch");
        (0..self.ncols)
            .map(|j| {
                (self.colptr[j]..self.colptr[j + 1])
                    .map(|k| self.nzval[k] * x[self.rowval[k]])
                    .sum()
            })
            .collect()
    }

    /// Number of stored entries in each row.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nrows];
        for &r in &self.rowval {
            counts[r] += 1;
        }
        counts
    }

    pub fn row_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.nrows];
        for (i, _, v) in self.iter() {
            sq[i] += v * v;
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Self {
        assert_eq!(factors.len(), self.nrows);
        let nzval = self
            .rowval
            .iter()
            .zip(&self.nzval)
            .map(|(&r, &v)| v * factors[r])
            .collect();
        self.with_values(nzval)
    }

    /// Submatrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.nrows];
        for (new, &old) in rows.iter().enumerate() {
            map[old] = new;
        }
        let mut trip = Vec::new();
        for (i, j, v) in self.iter() {
            if map[i] != usize::MAX {
                trip.push((map[i], j, v));
            }
        }
        Self::from_triplets(rows.len(), self.ncols, &trip).expect("row selection is well formed")
    }

    /// True when `|A_ij - A_ji| <= rel_tol * max|A|` for every pair, with
    /// structurally absent entries read as zero.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let scale = self.nzval.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = rel_tol * scale;
        self.iter().all(|(i, j, v)| {
            let other = self.get(j, i).unwrap_or(0.0);
            (v - other).abs() <= tol
        })
    }

    /// Upper triangle (including the diagonal).
    pub fn upper_triangle(&self) -> Self {
        let trip: Vec<_> = self.iter().filter(|&(i, j, _)| i <= j).collect();
        Self::from_triplets(self.nrows, self.ncols, &trip).expect("subset of a valid matrix")
    }

    /// Mirrors a lower-triangular matrix into a full symmetric one.
    pub fn symmetric_from_lower(&self) -> Result<Self, SparseError> {
        let mut trip = Vec::with_capacity(2 * self.nnz());
        for (i, j, v) in self.iter() {
            if i < j {
                return Err(SparseError::EntryOutOfRange {
                    row: i,
                    col: j,
                    nrows: self.nrows,
                    ncols: self.ncols,
                });
            }
            trip.push((i, j, v));
            if i != j {
                trip.push((j, i, v));
            }
        }
        Self::from_triplets(self.nrows, self.ncols, &trip)
    }

    /// Sum of two matrices with identical shape; the pattern is the union.
    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut colptr = Vec::with_capacity(self.ncols + 1);
        let mut rowval = Vec::with_capacity(self.nnz() + other.nnz());
        let mut nzval = Vec::with_capacity(self.nnz() + other.nnz());
        colptr.push(0);
        for j in 0..self.ncols {
            let (ra, va) = self.col(j);
            let (rb, vb) = other.col(j);
            let (mut a, mut b) = (0, 0);
            while a < ra.len() || b < rb.len() {
                if b == rb.len() || (a < ra.len() && ra[a] < rb[b]) {
                    rowval.push(ra[a]);
                    nzval.push(va[a]);
                    a += 1;
                } else if a == ra.len() || rb[b] < ra[a] {
                    rowval.push(rb[b]);
                    nzval.push(vb[b]);
                    b += 1;
                } else {
                    rowval.push(ra[a]);
                    nzval.push(va[a] + vb[b]);
                    a += 1;
                    b += 1;
                }
            }
            colptr.push(rowval.len());
        }
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            colptr,
            rowval,
            nzval,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.with_values(self.nzval.iter().map(|v| alpha * v).collect())
    }

    /// Frobenius inner product `Σ A_ij B_ij`.
    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut s = 0.0;
        for j in 0..self.ncols {
            let (ra, va) = self.col(j);
            let (rb, vb) = other.col(j);
            let (mut a, mut b) = (0, 0);
            while a < ra.len() && b < rb.len() {
                match ra[a].cmp(&rb[b]) {
                    std::cmp::Ordering::Less => a += 1,
                    std::cmp::Ordering::Greater => b += 1,
                    std::cmp::Ordering::Equal => {
                        s += va[a] * vb[b];
                        a += 1;
                        b += 1;
                    }
                }
            }
        }
        s
    }

    /// True when every stored entry of `self` is also stored in `pattern`.
    pub fn pattern_within(&self, pattern: &Self) -> bool {
        self.iter().all(|(i, j, _)| pattern.get(i, j).is_some())
    }

    pub fn max_abs(&self) -> f64 {
        self.nzval.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.ncols, other.nrows, "matmul dimension mismatch");
        let mut colptr = Vec::with_capacity(other.ncols + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut rows: Vec<usize> = Vec::new();
        colptr.push(0);
        for j in 0..other.ncols {
            rows.clear();
            let (rb, vb) = other.col(j);
            for (&k, &bkj) in rb.iter().zip(vb) {
                let (ra, va) = self.col(k);
                for (&i, &aik) in ra.iter().zip(va) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        rows.push(i);
                    }
                    acc[i] += aik * bkj;
                }
            }
            rows.sort_unstable();
            for &i in &rows {
                rowval.push(i);
                nzval.push(acc[i]);
            }
            colptr.push(rowval.len());
        }
        Self {
            nrows: self.nrows,
            ncols: other.ncols,
            colptr,
            rowval,
            nzval,
        }
    }
}
