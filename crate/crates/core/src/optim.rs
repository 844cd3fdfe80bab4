//! Adam over the trainable parameters of a store.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moments, indexed like the store; empty for frozen
    /// parameters.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Adam {
        let zeros = |p: &crate::param::Param| if p.is_trainable() { alloc::vec![0.0; p.value().len()] } else { Vec::new() };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    /// Overwrite the moments of one trainable parameter, e.g. from a
    /// checkpoint.
    pub fn restore_moments(&mut self, id: ParamId, m: &[f64], v: &[f64]) -> Result<()> {
        let i = id.index();
        if i >= self.m.len() || m.len() != self.m[i].len() || v.len() != self.v[i].len() {
            return Err(Error::Usage(alloc::format!("moment shapes do not match parameter {}", i)));
        }
        self.m[i].copy_from_slice(m);
        self.v[i].copy_from_slice(v);
        Ok(())
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Check the state still fits `store` (after loading a checkpoint).
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && store.iter().all(|p| {
                let n = if p.is_trainable() { p.value().len() } else { 0 };
                self.m[p.id().index()].len() == n && self.v[p.id().index()].len() == n
            })
    }

    /// One bias-corrected update from the accumulated gradients. Any
    /// non-finite gradient aborts before anything changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !self.matches(store) {
            return Err(Error::Usage("optimizer state does not match the parameter store".into()));
        }
        let next = self.step + 1;
        for p in store.iter().filter(|p| p.is_trainable()) {
            if p.grad().data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { param: p.name().into(), step: next });
            }
        }
        self.step = next;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for id in store.trainable_ids() {
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            store.update_trainable(id, |value, grad| {
                for i in 0..value.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    value[i] -= lr * mh / (libm::sqrt(vh) + eps);
                }
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let frozen = s.add("w", Tensor::vector(vec![1.0, -2.0]).unwrap(), false);
        let train = s.add("x", Tensor::scalar(0.5), true);
        (s, frozen, train)
    }

    fn load_grad(s: &mut ParamStore, scale: f64) {
        let mut g = Graph::new();
        let w = g.param(s.get(ParamId(0)));
        let x = g.param(s.get(ParamId(1)));
        let wx = g.scale(w, scale);
        let sw = g.sum(wx);
        let sx = g.scale(x, scale);
        let loss = g.add(sw, sx).unwrap();
        let grads = g.backward(loss).unwrap();
        s.accumulate(&grads);
    }

    #[test]
    fn first_step_is_lr() {
        let (mut s, _, x) = store();
        let mut opt = Adam::new(&s, 1e-3);
        load_grad(&mut s, 3.0);
        opt.step(&mut s).unwrap();
        let moved = s.get(x).value().item() - 0.5;
        assert!((moved + 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15, "{}", moved);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_grad_is_still() {
        let (mut s, _, x) = store();
        let mut opt = Adam::new(&s, 1e-3);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(x).value().item(), 0.5);
    }

    #[test]
    fn frozen_untouched() {
        let (mut s, w, _) = store();
        let before = s.get(w).value().clone();
        let mut opt = Adam::new(&s, 1e-2);
        for _ in 0..100 {
            load_grad(&mut s, 1.0);
            opt.step(&mut s).unwrap();
            s.zero_grad();
        }
        assert_eq!(s.get(w).value(), &before);
        assert_eq!(s.get(w).grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut s, _, x) = store();
        let mut opt = Adam::new(&s, 1e-3);
        s.add_grad(x, &[f64::NAN]).unwrap();
        match opt.step(&mut s) {
            Err(Error::NonFiniteGradient { param, step }) => {
                assert_eq!(param, "x");
                assert_eq!(step, 1);
            }
            other => panic!("{:?}", other),
        }
        assert_eq!(s.get(x).value().item(), 0.5);
        assert_eq!(opt.step_count(), 0);
    }
}
