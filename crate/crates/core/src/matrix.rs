//! Dense row-major `f64` matrices.
//!
//! This is the value-level substrate: the autodiff tape records operations
//! over these, and the data/evaluation pipelines use them directly. All
//! arithmetic is 64-bit; filtering recursions amplify rounding in
//! covariances, so nothing here drops to single precision.

use crate::error::{Error, Result};

/// Dense matrix with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a row-major value slice.
    pub fn from_rows(rows: usize, cols: usize, values: &[f64]) -> Self {
        assert_eq!(
            values.len(),
            rows * cols,
            "value slice length {} does not match {}x{}",
            values.len(),
            rows,
            cols
        );
        Matrix {
            rows,
            cols,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col_vec(values: &[f64]) -> Self {
        Matrix::from_rows(values.len(), 1, values)
    }

    /// Diagonal matrix from a slice.
    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// The single entry of a 1x1 matrix.
    pub fn scalar(&self) -> f64 {
        assert!(self.is_scalar(), "scalar() on {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// 0.5 * (A + A^T).
    pub fn symmetrize(&self) -> Matrix {
        assert_eq!(self.rows, self.cols, "symmetrize needs a square matrix");
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    /// Maximum absolute asymmetry |A_ij - A_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Adds `eps` to every diagonal entry.
    pub fn add_scaled_identity(&self, eps: f64) -> Matrix {
        let mut out = self.clone();
        let n = self.rows.min(self.cols);
        for i in 0..n {
            out.data[i * self.cols + i] += eps;
        }
        out
    }

    /// Stacks `self` on top of `other`.
    pub fn concat_rows(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Copies rows `start..start+len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.rows {
            return Err(Error::Contract(format!(
                "slice_rows {}..{} out of bounds for {} rows",
                start,
                start + len,
                self.rows
            )));
        }
        Ok(Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Copies columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(Error::Contract(format!(
                "slice_cols {}..{} out of bounds for {} columns",
                start,
                start + len,
                self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, len);
        for i in 0..self.rows {
            for j in 0..len {
                out.data[i * len + j] = self.data[i * self.cols + start + j];
            }
        }
        Ok(out)
    }

    /// Lower-triangular Cholesky factor of a symmetric positive-definite
    /// matrix. The diagonal of the factor is positive, which fixes the
    /// sign convention. Symmetry is the caller's responsibility; only the
    /// lower triangle is read.
    pub fn cholesky(&self) -> Result<Matrix> {
        assert_eq!(self.rows, self.cols, "cholesky needs a square matrix");
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i });
                    }
                    l.set(i, j, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Ok(l)
    }

    /// Solves `self * x = b` for symmetric positive-definite `self` via
    /// Cholesky. No inverse is ever materialized.
    pub fn solve_spd(&self, b: &Matrix) -> Result<Matrix> {
        let l = self.cholesky()?;
        l.solve_with_factor(b)
    }

    /// Solves `L L^T x = b` given a lower-triangular factor `L = self`.
    pub fn solve_with_factor(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows != self.rows {
            return Err(Error::ShapeMismatch {
                op: "solve_spd",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let y = self.solve_lower(b);
        Ok(self.solve_lower_transposed(&y))
    }

    /// Forward substitution `L y = b` for lower-triangular `L = self`.
    pub fn solve_lower(&self, b: &Matrix) -> Matrix {
        let n = self.rows;
        let mut x = b.clone();
        for col in 0..x.cols {
            for i in 0..n {
                let mut s = x.get(i, col);
                for k in 0..i {
                    s -= self.get(i, k) * x.get(k, col);
                }
                x.set(i, col, s / self.get(i, i));
            }
        }
        x
    }

    /// Back substitution `L^T x = b` for lower-triangular `L = self`.
    pub fn solve_lower_transposed(&self, b: &Matrix) -> Matrix {
        let n = self.rows;
        let mut x = b.clone();
        for col in 0..x.cols {
            for i in (0..n).rev() {
                let mut s = x.get(i, col);
                for k in (i + 1)..n {
                    s -= self.get(k, i) * x.get(k, col);
                }
                x.set(i, col, s / self.get(i, i));
            }
        }
        x
    }

    /// log det of an SPD matrix via its Cholesky factor.
    pub fn log_det_spd(&self) -> Result<f64> {
        let l = self.cholesky()?;
        Ok((0..l.rows).map(|i| 2.0 * l.get(i, i).ln()).sum())
    }
}
