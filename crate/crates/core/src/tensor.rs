//! Dense row-major tensors and affine maps over `f64`.
//!
//! Every numeric intermediate in the crate is carried by [`Tensor`]: a shape
//! vector plus a flat row-major buffer. Spatial tensors are channel-last
//! (`[H, W, C]`, `[X, Y, Z, C]`) so the corner-loop oracles in the tests can
//! index them directly.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CoreError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Build a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for axis in (0..self.shape.len()).rev() {
            debug_assert!(idx[axis] < self.shape[axis]);
            off += idx[axis] * stride;
            stride *= self.shape[axis];
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise addition; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Contiguous row at `idx` over the last axis.
    pub fn last_axis_slice(&self, idx: &[usize]) -> &[f64] {
        let c = *self.shape.last().expect("tensor has rank >= 1");
        let mut full = idx.to_vec();
        full.push(0);
        let off = self.offset(&full);
        &self.data[off..off + c]
    }
}

/// Affine map `y = W x + b` applied over the last axis of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    out_dim: usize,
    in_dim: usize,
    /// `out_dim * in_dim`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearMap {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != out_dim * in_dim {
            return Err(CoreError::shape(format!(
                "weight has {} entries, expected {}x{}",
                weight.len(),
                out_dim,
                in_dim
            )));
        }
        if bias.len() != out_dim {
            return Err(CoreError::shape(format!(
                "bias has {} entries, expected {}",
                bias.len(),
                out_dim
            )));
        }
        Ok(LinearMap {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        LinearMap {
            out_dim: dim,
            in_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearMap {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Apply to a bare vector of length `in_dim`.
    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.bias.clone();
        for (j, out_j) in out.iter_mut().enumerate() {
            let row = &self.weight[j * self.in_dim..(j + 1) * self.in_dim];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *out_j += acc;
        }
        out
    }

    /// Apply over the last axis of `x`; output keeps the leading shape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let last = *shape.last().ok_or_else(|| CoreError::shape("rank-0 input"))?;
        if last != self.in_dim {
            return Err(CoreError::shape(format!(
                "linear map expects last extent {}, got {}",
                self.in_dim, last
            )));
        }
        let rows = x.len() / last;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.out_dim;
        let mut data = Vec::with_capacity(rows * self.out_dim);
        for r in 0..rows {
            let row = &x.data()[r * last..(r + 1) * last];
            data.extend_from_slice(&self.apply_vec(row));
        }
        Tensor::new(out_shape, data)
    }
}
