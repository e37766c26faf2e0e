//! Row-major dense matrix with the handful of operations the model needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Above this many multiply-adds a matrix product is split across threads.
const PAR_FLOP_THRESHOLD: usize = 64 * 1024;

/// Row-major dense matrix of `f64`.
///
/// `data.len() == rows * cols` always holds; element `(i, j)` lives at
/// `data[i * cols + j]`. Equality is bitwise on the payload, which is what
/// the white-noise kernel uses to decide whether two inputs are the same
/// set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Wrap an existing row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "from_vec",
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        DenseMatrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// Single-row matrix from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        DenseMatrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    /// Borrow row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy column `j` into a new vector.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        matmul_flags(self, other, false, false)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &DenseMatrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of squared entries.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Mean of the diagonal; zero for an empty matrix.
    pub fn mean_diag(&self) -> f64 {
        let n = self.rows.min(self.cols);
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `op(a) * op(b)` where `op` transposes when the matching flag is set.
///
/// Row-parallel over the output when the flop count is large enough; each
/// output row is produced by one task with a fixed-order inner loop, so
/// results do not depend on the thread count.
pub fn matmul_flags(
    a: &DenseMatrix,
    b: &DenseMatrix,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<DenseMatrix> {
    let (ar, ac) = if transpose_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (br, bc) = if transpose_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ac != br {
        return Err(Error::dims(
            "matmul",
            format!(
                "op(a) is {ar}x{ac}, op(b) is {br}x{bc} (flags {transpose_a}, {transpose_b})"
            ),
        ));
    }
    let inner = ac;
    let mut out = DenseMatrix::zeros(ar, bc);
    let parallel = ar * bc * inner >= PAR_FLOP_THRESHOLD;
    match (transpose_a, transpose_b) {
        (false, false) => {
            exec::for_each_row(&mut out.data, bc, parallel, |i, row| {
                let a_row = a.row(i);
                for k in 0..inner {
                    let aik = a_row[k];
                    if aik != 0.0 {
                        let b_row = b.row(k);
                        for (o, &bv) in row.iter_mut().zip(b_row) {
                            *o += aik * bv;
                        }
                    }
                }
            });
        }
        (true, false) => {
            exec::for_each_row(&mut out.data, bc, parallel, |i, row| {
                for k in 0..inner {
                    let aki = a.data[k * a.cols + i];
                    if aki != 0.0 {
                        let b_row = b.row(k);
                        for (o, &bv) in row.iter_mut().zip(b_row) {
                            *o += aki * bv;
                        }
                    }
                }
            });
        }
        (false, true) => {
            exec::for_each_row(&mut out.data, bc, parallel, |i, row| {
                let a_row = a.row(i);
                for (j, o) in row.iter_mut().enumerate() {
                    let b_row = b.row(j);
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += a_row[k] * b_row[k];
                    }
                    *o = s;
                }
            });
        }
        (true, true) => {
            exec::for_each_row(&mut out.data, bc, parallel, |i, row| {
                for (j, o) in row.iter_mut().enumerate() {
                    let b_row = b.row(j);
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += a.data[k * a.cols + i] * b_row[k];
                    }
                    *o = s;
                }
            });
        }
    }
    Ok(out)
}
