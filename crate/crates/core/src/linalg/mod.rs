//! Dense real linear algebra on small matrices.
//!
//! Everything here is 64-bit and single-threaded so that identical inputs
//! always produce identical output bits. The decompositions are Jacobi
//! methods: cyclic two-sided Jacobi for symmetric eigenproblems and one-sided
//! (Hestenes) Jacobi for the SVD.

mod eig;
mod svd;

use std::fmt;
use std::ops::Index;

use crate::error::{invalid, mismatch, Result};

pub use eig::{inv_spd, inv_sqrt_psd, sqrt_psd, sym_eig, EigResult};
pub use svd::{svd, truncate_svd, SvdResult};

/// Dense row-major matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for data already known to be finite.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square diagonal matrix.
    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self::new(n, n, data)
    }

    /// Builds a matrix from a list of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(mismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Standard product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(mismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(m, n, out))
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(mismatch(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "subtract", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    /// Sum of squared entries.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entry-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        (self.shape() == other.shape()).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows)
                .all(|i| (i + 1..self.cols).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrize(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(mismatch(format!(
                "{}x{} matrix is not square",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut out = self.data.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        Ok(Matrix::from_raw(n, n, out))
    }

    /// Columns `start..start + len`.
    pub fn column_block(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(mismatch(format!(
                "column block {start}..{} out of range for {} columns",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Matrix::from_raw(self.rows, len, data))
    }

    /// Rows `start..start + len`.
    pub fn row_block(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.rows {
            return Err(mismatch(format!(
                "row block {start}..{} out of range for {} rows",
                start + len,
                self.rows
            )));
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Ok(Matrix::from_raw(len, self.cols, data))
    }

    /// Horizontal concatenation `[A | B | ...]`.
    pub fn hcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(mismatch(format!(
                "hcat of {rows}-row and {}-row blocks",
                b.rows
            )));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Vertical concatenation.
    pub fn vcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if let Some(b) = blocks.iter().find(|b| b.cols != cols) {
            return Err(mismatch(format!(
                "vcat of {cols}-col and {}-col blocks",
                b.cols
            )));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// `blkdiag(A, B)` with zero off-diagonal blocks.
    pub fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
        let (rows, cols) = (a.rows + b.rows, a.cols + b.cols);
        let mut data = vec![0.0; rows * cols];
        for i in 0..a.rows {
            data[i * cols..i * cols + a.cols].copy_from_slice(a.row(i));
        }
        for i in 0..b.rows {
            let start = (a.rows + i) * cols + a.cols;
            data[start..start + b.cols].copy_from_slice(b.row(i));
        }
        Matrix::from_raw(rows, cols, data)
    }

    /// Multiplies column `j` by `diag[j]`, i.e. `self · diag(diag)`.
    pub fn scale_columns(&self, diag: &[f64]) -> Result<Matrix> {
        if diag.len() != self.cols {
            return Err(mismatch(format!(
                "{} column scales for {} columns",
                diag.len(),
                self.cols
            )));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.cols.max(1)) {
            for (v, d) in row.iter_mut().zip(diag) {
                *v *= d;
            }
        }
        Matrix::new(self.rows, self.cols, data)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn frobenius_norm_sq(a: &Matrix) -> f64 {
    a.frobenius_norm_sq()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CareError;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn constructor_rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(CareError::InvalidArgument(_))
        ));
        assert!(Matrix::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0]),
            Err(CareError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let col = m(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&col).unwrap(), m(&[&[2.0], &[4.0]]));
        assert_eq!(a.matmul(&Matrix::zeros(2, 3)).unwrap(), Matrix::zeros(2, 3));
        assert!(matches!(
            a.matmul(&Matrix::zeros(3, 1)),
            Err(CareError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm_sq(&Matrix::zeros(3, 4)), 0.0);
        assert_eq!(frobenius_norm_sq(&m(&[&[3.0, 4.0]])), 25.0);
        assert_eq!(frobenius_norm_sq(&Matrix::identity(3)), 3.0);
    }

    #[test]
    fn block_helpers() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(
            a.column_block(1, 2).unwrap(),
            m(&[&[2.0, 3.0], &[5.0, 6.0]])
        );
        assert_eq!(a.row_block(1, 1).unwrap(), m(&[&[4.0, 5.0, 6.0]]));
        let left = a.column_block(0, 1).unwrap();
        let right = a.column_block(1, 2).unwrap();
        assert_eq!(Matrix::hcat(&[&left, &right]).unwrap(), a);
        let bd = Matrix::block_diag(&m(&[&[2.0]]), &m(&[&[3.0]]));
        assert_eq!(bd, m(&[&[2.0, 0.0], &[0.0, 3.0]]));
        assert!(a.column_block(2, 2).is_err());
    }
}
