//! Dense row-major tensors, matrices, unfoldings and mode-n contractions.
//!
//! Modes are zero-based throughout. Element `(i_0, .., i_{N-1})` lives at the
//! row-major offset (last index fastest).
//!
//! The mode-`n` unfolding places mode `n` on the rows and the remaining modes,
//! in their original order and again row-major, on the columns. Equivalently it
//! moves mode `n` to the front and reinterprets the data as a matrix.

mod io;
mod svd;

pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, DGT1_MAGIC};
pub use svd::{svd, SvdResult};
pub(crate) use io::read_header as io_read_header;
pub(crate) use svd::extend_orthonormal;

use crate::error::{shape_err, Error, Result};

/// Dense N-order array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err("tensor order must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(shape_err(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / ‖self‖_F` (absolute error when `self` is zero).
    pub fn relative_error(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "cannot compare shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = self.frobenius_norm();
        Ok(if norm > 0.0 { diff / norm } else { diff })
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::InvalidMode {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }

    /// Sizes of the modes before, at, and after `mode`.
    fn split_at_mode(&self, mode: usize) -> (usize, usize, usize) {
        let before = self.shape[..mode].iter().product();
        let after = self.shape[mode + 1..].iter().product();
        (before, self.shape[mode], after)
    }

    /// Mode-`mode` unfolding: a `D_mode × ∏_{k≠mode} D_k` matrix.
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        self.check_mode(mode)?;
        let (before, dim, after) = self.split_at_mode(mode);
        let cols = before * after;
        let mut out = vec![0.0; dim * cols];
        for a in 0..before {
            for d in 0..dim {
                let src = &self.data[(a * dim + d) * after..(a * dim + d + 1) * after];
                out[d * cols + a * after..d * cols + (a + 1) * after].copy_from_slice(src);
            }
        }
        Ok(Matrix {
            rows: dim,
            cols,
            data: out,
        })
    }

    /// Inverse of [`Tensor::unfold`].
    pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if mode >= shape.len() {
            return Err(Error::InvalidMode {
                mode,
                order: shape.len(),
            });
        }
        if m.rows != shape[mode] || m.rows * m.cols != len {
            return Err(shape_err(format!(
                "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
                m.rows, m.cols
            )));
        }
        let before: usize = shape[..mode].iter().product();
        let after: usize = shape[mode + 1..].iter().product();
        let dim = shape[mode];
        let cols = m.cols;
        let mut data = vec![0.0; len];
        for a in 0..before {
            for d in 0..dim {
                data[(a * dim + d) * after..(a * dim + d + 1) * after]
                    .copy_from_slice(&m.data[d * cols + a * after..d * cols + (a + 1) * after]);
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Mode-`mode` product `t ×_mode m` with `m` of shape `R × D_mode`.
    pub fn mode_product(&self, m: &Matrix, mode: usize) -> Result<Tensor> {
        self.check_mode(mode)?;
        let (before, dim, after) = self.split_at_mode(mode);
        if m.cols != dim {
            return Err(shape_err(format!(
                "mode-{mode} product needs a matrix with {dim} columns, got {}x{}",
                m.rows, m.cols
            )));
        }
        let rows = m.rows;
        let mut out = vec![0.0; before * rows * after];
        for a in 0..before {
            let src = &self.data[a * dim * after..(a + 1) * dim * after];
            let dst = &mut out[a * rows * after..(a + 1) * rows * after];
            for r in 0..rows {
                let row = &mut dst[r * after..(r + 1) * after];
                for (d, &coef) in m.row(r).iter().enumerate() {
                    if coef == 0.0 {
                        continue;
                    }
                    for (o, &s) in row.iter_mut().zip(&src[d * after..(d + 1) * after]) {
                        *o += coef * s;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[mode] = rows;
        Ok(Tensor { shape, data: out })
    }

    /// Contracts mode `mode` with a vector, dropping that mode. An order-1
    /// tensor contracts to a tensor of shape `[1]`.
    pub fn mode_vec_product(&self, v: &[f64], mode: usize) -> Result<Tensor> {
        self.check_mode(mode)?;
        let (before, dim, after) = self.split_at_mode(mode);
        if v.len() != dim {
            return Err(shape_err(format!(
                "mode-{mode} vector product needs length {dim}, got {}",
                v.len()
            )));
        }
        let mut out = vec![0.0; before * after];
        for a in 0..before {
            let dst = &mut out[a * after..(a + 1) * after];
            for (d, &coef) in v.iter().enumerate() {
                if coef == 0.0 {
                    continue;
                }
                let src = &self.data[(a * dim + d) * after..(a * dim + d + 1) * after];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += coef * s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(mode);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data: out })
    }

    /// Stacks equally shaped tensors along a new trailing mode.
    pub fn stack_last(slices: &[&Tensor]) -> Result<Tensor> {
        let first = slices
            .first()
            .ok_or_else(|| shape_err("cannot stack zero tensors"))?;
        if let Some(bad) = slices.iter().find(|t| t.shape != first.shape) {
            return Err(shape_err(format!(
                "cannot stack {:?} with {:?}",
                bad.shape, first.shape
            )));
        }
        let n = slices.len();
        let len = first.len();
        let mut data = vec![0.0; len * n];
        for (k, s) in slices.iter().enumerate() {
            for (i, &v) in s.data.iter().enumerate() {
                data[i * n + k] = v;
            }
        }
        let mut shape = first.shape.clone();
        shape.push(n);
        Ok(Tensor { shape, data })
    }

    /// Slice `index` of the trailing mode.
    pub fn last_slice(&self, index: usize) -> Result<Tensor> {
        let n = *self.shape.last().unwrap_or(&0);
        if index >= n {
            return Err(shape_err(format!("slice {index} out of range {n}")));
        }
        let data = self.data.iter().skip(index).step_by(n).copied().collect();
        let mut shape = self.shape[..self.order() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data })
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(shape_err(format!(
                "{rows}x{cols} matrix cannot hold {} elements",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in dst.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(shape_err(format!(
                "cannot multiply {}x{} by a vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Result<Matrix> {
        if k == 0 || k > self.cols {
            return Err(shape_err(format!("cannot take {k} of {} columns", self.cols)));
        }
        let mut out = Matrix::zeros(self.rows, k);
        for r in 0..self.rows {
            out.data[r * k..(r + 1) * k].copy_from_slice(&self.row(r)[..k]);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        Tensor {
            shape: vec![m.rows, m.cols],
            data: m.data,
        }
    }
}

impl TryFrom<Tensor> for Matrix {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [rows, cols] => Ok(Matrix {
                rows,
                cols,
                data: t.data,
            }),
            _ => Err(shape_err(format!(
                "order-{} tensor is not a matrix",
                t.order()
            ))),
        }
    }
}
