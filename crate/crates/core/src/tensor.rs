//! Dense row-major `f64` matrices.
//!
//! Every tensor in the crate is rank 2; scalars are `1x1` and vectors are
//! single rows or columns. Reductions always accumulate in ascending index
//! order so identical inputs give bit-identical outputs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Value of a `1x1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != [1, 1] {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self @ other`, accumulating over the inner index in ascending order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }

    /// `self @ otherᵀ`.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.cols() {
            return Err(Error::Shape {
                op: "matmul_bt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        // Same ascending accumulation as `matmul`, so results are identical;
        // the row-axpy loop vectorizes where a dot product cannot.
        self.matmul(&other.transpose())
    }

    /// `selfᵀ @ other` without materializing the transpose.
    pub fn matmul_at(&self, other: &Tensor) -> Result<Tensor> {
        let (k, n) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_at",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(self.cols().max(1)) {
            for (o, r) in chunk.iter_mut().zip(&row.data) {
                *o += r;
            }
        }
        Tensor::new(self.rows(), self.cols(), out)
    }

    /// Multiplies row `i` by the scalar `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        if col.cols() != 1 || col.rows() != self.rows() {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: self.shape.clone(),
                rhs: col.shape.clone(),
            });
        }
        let m = self.cols();
        let mut out = self.data.clone();
        for (i, &s) in col.data.iter().enumerate() {
            for o in &mut out[i * m..(i + 1) * m] {
                *o *= s;
            }
        }
        Tensor::new(self.rows(), m, out)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |p| p.rows());
        if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: bad.shape.clone(),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(rows, cols, out)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(self.rows() * (end - start));
        for r in 0..self.rows() {
            out.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor::new(self.rows(), end - start, out)
    }

    /// Same data, new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: vec![rows, cols],
            });
        }
        Tensor::new(rows, cols, self.data.clone())
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let c = self.cols();
        Tensor::new(end - start, c, self.data[start * c..end * c].to_vec())
    }

    /// Squared Euclidean norm of each row, as a column.
    pub fn row_sqnorm(&self) -> Tensor {
        let data = (0..self.rows())
            .map(|r| self.row(r).iter().fold(0.0, |acc, v| acc + v * v))
            .collect();
        Tensor {
            shape: vec![self.rows(), 1],
            data,
        }
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Tensor {
        let m = self.cols();
        let mut out = vec![0.0; m];
        for r in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![1, m],
            data: out,
        }
    }

    pub fn mean_rows(&self) -> Result<Tensor> {
        if self.rows() == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        Ok(self.sum_rows().scale(1.0 / self.rows() as f64))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    /// `out[k] = self[index[k]]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let m = self.cols();
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index {
            if i >= self.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: self.shape.clone(),
                    rhs: vec![i],
                });
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(index.len(), m, out)
    }

    /// `out[index[k]] += self[k]` over `k` ascending, into `rows` output rows.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Result<Tensor> {
        if index.len() != self.rows() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: self.shape.clone(),
                rhs: vec![index.len()],
            });
        }
        let m = self.cols();
        let mut out = vec![0.0; rows * m];
        for (k, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(Error::Shape {
                    op: "scatter_add_rows",
                    lhs: vec![rows, m],
                    rhs: vec![i],
                });
            }
            for (o, v) in out[i * m..(i + 1) * m].iter_mut().zip(self.row(k)) {
                *o += v;
            }
        }
        Tensor::new(rows, m, out)
    }
}
