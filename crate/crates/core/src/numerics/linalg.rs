//! Dense vectors and row-major matrices with the two factorizations the
//! rest of the crate needs: Cholesky for SPD systems and partially pivoted
//! LU for the (indefinite) KKT systems arising in implicit differentiation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinalgError {
    /// A Cholesky pivot was non-positive: the matrix is not positive definite.
    #[error("matrix is not positive definite (pivot {pivot_index})")]
    NotPositiveDefinite { pivot_index: usize },
    /// An LU pivot fell below the singularity threshold.
    #[error("matrix is numerically singular (pivot {pivot_index})")]
    Singular { pivot_index: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Owned dense vector of `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self { data: vec![value; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_vec(self.data.iter().map(|v| c * v).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self::from_vec(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self::from_vec(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    /// self += c * other
    pub fn axpy(&mut self, c: f64, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(data: Vec<f64>) -> Self {
        Self::from_vec(data)
    }
}

/// Owned dense matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "entry count must equal rows*cols");
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matvec(&self, x: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = dot_slices(self.row(r), x.as_slice());
        }
        DenseVector::from_vec(out)
    }

    /// Aᵀ x without forming the transpose.
    pub fn matvec_transpose(&self, x: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.rows, x.len());
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr != 0.0 {
                for (o, a) in out.iter_mut().zip(self.row(r)) {
                    *o += a * xr;
                }
            }
        }
        DenseVector::from_vec(out)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a != 0.0 {
                    let orow = other.row(k);
                    let out_row = out.row_mut(i);
                    for (o, b) in out_row.iter_mut().zip(orow) {
                        *o += a * b;
                    }
                }
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| c * v).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if (self.get(r, c) - self.get(c, r)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
///
/// Fails with [`LinalgError::NotPositiveDefinite`] when a pivot is ≤ 0.
pub fn cholesky_solve(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector, LinalgError> {
    let chol = CholeskyFactors::factor(a)?;
    let mut x = chol.solve(b);
    refine(a, b, &mut x, |r| chol.solve(r));
    Ok(x)
}

/// Lower-triangular Cholesky factor, stored dense.
pub struct CholeskyFactors {
    l: DenseMatrix,
}

impl CholeskyFactors {
    pub fn factor(a: &DenseMatrix) -> Result<Self, LinalgError> {
        let n = a.rows();
        assert_eq!(n, a.cols(), "Cholesky needs a square matrix");
        let mut l = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a.get(i, j);
                for k in 0..j {
                    sum -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(LinalgError::NotPositiveDefinite { pivot_index: i });
                    }
                    l.set(i, i, sum.sqrt());
                } else {
                    l.set(i, j, sum / l.get(j, j));
                }
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &DenseVector) -> DenseVector {
        let n = self.l.rows();
        debug_assert_eq!(b.len(), n);
        let mut y = b.as_slice().to_vec();
        // L y = b
        for i in 0..n {
            let mut v = y[i];
            for k in 0..i {
                v -= self.l.get(i, k) * y[k];
            }
            y[i] = v / self.l.get(i, i);
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= self.l.get(k, i) * y[k];
            }
            y[i] = v / self.l.get(i, i);
        }
        DenseVector::from_vec(y)
    }
}

/// Solve `K x = b` for square nonsingular `K` via partially pivoted LU.
pub fn lu_solve(k: &DenseMatrix, b: &DenseVector) -> Result<DenseVector, LinalgError> {
    let lu = LuFactors::factor(k)?;
    let mut x = lu.solve(b);
    refine(k, b, &mut x, |r| lu.solve(r));
    Ok(x)
}

/// LU factorization with partial pivoting, reusable across right-hand sides.
pub struct LuFactors {
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl LuFactors {
    pub const PIVOT_TOL: f64 = 1e-14;

    pub fn factor(a: &DenseMatrix) -> Result<Self, LinalgError> {
        let n = a.rows();
        assert_eq!(n, a.cols(), "LU needs a square matrix");
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot_row = col;
            let mut pivot_val = lu.get(col, col).abs();
            for r in (col + 1)..n {
                let v = lu.get(r, col).abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = r;
                }
            }
            if pivot_val < Self::PIVOT_TOL {
                return Err(LinalgError::Singular { pivot_index: col });
            }
            if pivot_row != col {
                perm.swap(col, pivot_row);
                for c in 0..n {
                    let tmp = lu.get(col, c);
                    lu.set(col, c, lu.get(pivot_row, c));
                    lu.set(pivot_row, c, tmp);
                }
            }
            let inv_piv = 1.0 / lu.get(col, col);
            for r in (col + 1)..n {
                let factor = lu.get(r, col) * inv_piv;
                lu.set(r, col, factor);
                if factor != 0.0 {
                    for c in (col + 1)..n {
                        let v = lu.get(r, c) - factor * lu.get(col, c);
                        lu.set(r, c, v);
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &DenseVector) -> DenseVector {
        let n = self.lu.rows();
        debug_assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut v = x[i];
            for k in 0..i {
                v -= self.lu.get(i, k) * x[k];
            }
            x[i] = v;
        }
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in (i + 1)..n {
                v -= self.lu.get(i, k) * x[k];
            }
            x[i] = v / self.lu.get(i, i);
        }
        DenseVector::from_vec(x)
    }

    /// Rough conditioning indicator: ratio of extreme |U| pivots.
    pub fn pivot_ratio(&self) -> f64 {
        let n = self.lu.rows();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..n {
            let p = self.lu.get(i, i).abs();
            lo = lo.min(p);
            hi = hi.max(p);
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// One pass of iterative refinement when the first residual is not tight.
fn refine<F: Fn(&DenseVector) -> DenseVector>(
    a: &DenseMatrix,
    b: &DenseVector,
    x: &mut DenseVector,
    solve: F,
) {
    let r = b.sub(&a.matvec(x));
    if r.norm_inf() > 1e-12 * (1.0 + b.norm_inf()) {
        let dx = solve(&r);
        x.axpy(1.0, &dx);
    }
}
