//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: rank-1/rank-2 row-major tensors, a
//! define-by-run [`Tape`] recording every primitive, and exact adjoints for
//! each. Parameters live in a [`ParamSet`] so a backward pass can hand back
//! a gradient per named parameter, with zeros for parameters the loss never
//! touched.

mod check;
mod tape;

pub use check::{grad_check, GradCheckConfig};
pub use tape::{Tape, ValueId};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}")]
    UnsupportedShape { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("masked mean pool: mask selects no elements")]
    EmptyMask,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

/// Dense row-major tensor of 64-bit floats. Rank 1 or 2 in practice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar contents; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) view: rank-1 tensors count as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.rows_cols();
        self.data[r * cols + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all elements.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Identifier of a parameter inside a [`ParamSet`]; stable across training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
///
/// Insertion order is the canonical order used for checkpoints, gradients,
/// and the optimizer state, so it must be deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId, TensorError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// New set holding `self`'s parameters followed by `other`'s.
    pub fn merged(&self, other: &ParamSet) -> ParamSet {
        let mut joint = self.clone();
        for (name, tensor) in other.iter() {
            joint.insert(name, tensor.clone());
        }
        joint
    }

    /// Split into (matching, rest) by name predicate, preserving order.
    pub fn partition(&self, keep: impl Fn(&str) -> bool) -> (ParamSet, ParamSet) {
        let mut matching = ParamSet::new();
        let mut rest = ParamSet::new();
        for (name, tensor) in self.iter() {
            if keep(name) {
                matching.insert(name, tensor.clone());
            } else {
                rest.insert(name, tensor.clone());
            }
        }
        (matching, rest)
    }
}

/// One gradient tensor per parameter of the [`ParamSet`] a backward pass ran
/// against, aligned by [`ParamId`]. Untouched parameters hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    /// Accumulate `other`, scaled, into `self` (`self += scale * other`).
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (d, s) in dst.data.iter_mut().zip(src.data.iter()) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, scale: f64) {
        for g in &mut self.grads {
            for v in &mut g.data {
                *v *= scale;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}
