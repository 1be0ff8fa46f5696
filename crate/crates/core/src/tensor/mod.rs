//! Dense row-major `f64` tensors and a define-then-run reverse-mode autodiff
//! graph.

mod conv;
mod graph;
pub mod linalg;

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

pub use graph::{Bindings, Gradients, Graph, NodeId, Values};

/// Immutable dense tensor. Cloning is cheap: the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Checked constructor: the buffer length must match the shape and every
    /// element must be finite.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel = numel(shape);
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {pos} of a {shape:?} tensor is {}",
                data[pos]
            )));
        }
        Ok(Self::from_raw(shape, data))
    }

    /// Unchecked constructor for computed values; only the length is asserted.
    pub(crate) fn from_raw(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_raw(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self::from_raw(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; infinite if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Calls `f(out_flat, in_offset)` for every element of `shape` in row-major
/// order, where the input offset is `sum(index[k] * in_strides[k])`.
pub(crate) fn for_each_strided(shape: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for flat in 0..n {
        f(flat, offset);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            offset += in_strides[axis];
            if index[axis] < shape[axis] {
                break;
            }
            offset -= in_strides[axis] * shape[axis];
            index[axis] = 0;
        }
    }
}
