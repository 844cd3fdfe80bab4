//! Dense row-major `f64` tensors.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense n-dimensional array. An empty shape denotes a scalar.
///
/// Values are always finite: the checked constructors reject NaN and
/// infinities, and the graph flags any operation that produces one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(alloc::format!("zero-sized dimension in {:?}", shape)));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(alloc::format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("tensor data at index {}", i)));
        }
        Ok(Tensor { shape, data })
    }

    /// Skips the finiteness scan; used for operation outputs, which the graph
    /// checks separately.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![1.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![v; shape.iter().product()])
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Length of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Overwrite the values in place, keeping the shape.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::shape(&[self.data.len()], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("assigned values".into()));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(dot(&self.data, &self.data))
    }

    /// Element at `[row, col]` of a matrix.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    /// Little-endian IEEE-754 bytes of the data, row-major.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine distance `1 - a.b / (|a| |b|)` on plain slices.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine distance of a zero-norm vector"));
    }
    Ok(1.0 - dot(a, b) / (na * nb))
}

/// Scale to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = libm::sqrt(dot(v, v));
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput("normalizing a zero-norm vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}
