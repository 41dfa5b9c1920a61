use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Networks only use rank 1 and rank 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1 × n` matrix holding a single example.
    pub fn row_vector(data: &[S]) -> Self {
        Self {
            shape: vec![1, data.len()],
            data: data.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols()];
        for i in 0..self.rows() {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Copies the column range `[start, end)` into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Tensor<S> {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Tensor {
            shape: vec![rows, end - start],
            data,
        }
    }

    /// `self · wᵀ` where `self` is `n × k` and `w` is `m × k`.
    pub(crate) fn matmul_transposed(&self, w: &Tensor<S>) -> Tensor<S> {
        let (n, k, m) = (self.rows(), self.cols(), w.rows());
        debug_assert_eq!(k, w.cols());
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let x = self.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            for (j, oj) in o.iter_mut().enumerate() {
                let wr = &w.data[j * k..(j + 1) * k];
                *oj = x.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// `self · w` where `self` is `n × m` and `w` is `m × k`.
    pub(crate) fn matmul(&self, w: &Tensor<S>) -> Tensor<S> {
        let (n, m, k) = (self.rows(), self.cols(), w.cols());
        debug_assert_eq!(m, w.rows());
        let mut out = vec![S::zero(); n * k];
        for i in 0..n {
            let o = &mut out[i * k..(i + 1) * k];
            for (j, &a) in self.row(i).iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                for (oj, &b) in o.iter_mut().zip(w.row(j)) {
                    *oj += a * b;
                }
            }
        }
        Tensor {
            shape: vec![n, k],
            data: out,
        }
    }

    /// `selfᵀ · x` where `self` is `n × m` and `x` is `n × k`; result `m × k`.
    pub(crate) fn transpose_matmul(&self, x: &Tensor<S>) -> Tensor<S> {
        let (n, m, k) = (self.rows(), self.cols(), x.cols());
        debug_assert_eq!(n, x.rows());
        let mut out = vec![S::zero(); m * k];
        for i in 0..n {
            let xr = x.row(i);
            for (j, &a) in self.row(i).iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let o = &mut out[j * k..(j + 1) * k];
                for (oj, &b) in o.iter_mut().zip(xr) {
                    *oj += a * b;
                }
            }
        }
        Tensor {
            shape: vec![m, k],
            data: out,
        }
    }
}
