//! Row-major dense matrices of finite `f64`.
//!
//! `DenseMatrix` is the carrier for every data matrix and factor in the
//! crate. Kernels here are deliberately plain loops: the solver, the tape
//! and the baseline all call the same kernels, so identical operation
//! sequences produce bit-identical results.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix, checking shape, length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims("DenseMatrix::new", format!("zero dimension {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(
                "DenseMatrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for kernel outputs. Finiteness is checked at
    /// the boundaries that care (tape ops, solver outputs).
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds from nested rows; convenient for literals in tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != c {
                return Err(Error::dims(
                    "DenseMatrix::from_rows",
                    format!("row {i} has {} entries, expected {c}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn try_get(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::IndexOutOfRange {
                row: i,
                col: j,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.get(i, j))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_nonneg(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.data[i * self.cols + j]);
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Self) -> Self {
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
        Self::from_raw(m, n, out)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::dims(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise `max(0, x)`; the Euclidean projection onto the
    /// nonnegative orthant.
    pub fn positive_part(&self) -> Self {
        self.map(positive)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if !self.same_shape(other) {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    pub fn concat_columns(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dims("concat_columns", "no inputs"))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::dims("concat_columns", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    pub fn slice_columns(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.cols {
            return Err(Error::dims(
                "slice_columns",
                format!("range {start}..{end} of {} columns", self.cols),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Self::from_raw(self.rows, w, data))
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rows);
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self::from_raw(self.rows, self.cols, data)
    }

    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        self.transpose().permute_rows(perm).transpose()
    }
}

#[inline]
pub(crate) fn positive(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}
