//! Named parameters with gradient accumulators.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

impl Param {
    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { id, name: name.into(), value, grad, trainable });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Add graph gradients into the accumulators of trainable parameters.
    /// Frozen parameters never receive anything.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    /// Add `values` into one parameter's accumulator; frozen parameters
    /// ignore it.
    pub fn add_grad(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if values.len() != p.grad.len() {
            return Err(Error::shape(p.grad.shape(), &[values.len()]));
        }
        if p.trainable {
            for (acc, v) in p.grad.data_mut().iter_mut().zip(values) {
                *acc += v;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Replace a parameter's value, e.g. when loading a checkpoint.
    pub fn set_value(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        self.params[id.0].value.assign(values)
    }

    /// Apply `update` to the value of a trainable parameter.
    pub(crate) fn update_trainable(
        &mut self,
        id: ParamId,
        mut update: impl FnMut(&mut [f64], &[f64]),
    ) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Err(Error::Usage(alloc::format!("parameter `{}` is frozen", p.name)));
        }
        let Param { value, grad, .. } = p;
        update(value.data_mut(), grad.data());
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.id).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.id).collect()
    }

    /// SHA-256 over name, shape and little-endian data of the selected
    /// parameters, hex encoded.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = &self.params[id.0];
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            h.update(p.value.le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn frozen_digest(&self) -> String {
        self.digest(&self.frozen_ids())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{:02x}", b);
    }
    s
}
