//! Minimal reverse-mode gradient engine.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so the
//! node index is already a topological order and `backward` simply walks it
//! in reverse. Only the operations needed by the encoder and the losses are
//! provided. Leaves either own their tensor or borrow it (parameters and
//! images are borrowed, so building a graph never copies the backbone).

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_list, Error, Result};
use crate::param::{Param, ParamId};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Softmax { x: Var, scale: f64 },
    LogSoftmax { x: Var, scale: f64 },
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Element(Var, usize),
    Stack(Vec<Var>),
    L2Normalize(Var),
    CosineSimilarity(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    // Forward-pass quantities reused by the adjoint rule.
    aux: Vec<f64>,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    bindings: Vec<(Var, ParamId)>,
    min_kink: f64,
    non_finite: Option<usize>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: Vec::new(), min_kink: f64::INFINITY, non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest |pre-activation| seen by any hinge in the graph; used by the
    /// finite-difference checker to avoid subgradient points.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink
    }

    /// Index of the first node whose output was non-finite, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.non_finite
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>, requires_grad: bool, aux: Vec<f64>) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && value.data().iter().any(|v| !v.is_finite()) {
            self.non_finite = Some(idx);
        }
        self.nodes.push(Node { op, value, requires_grad, aux });
        Var(idx)
    }

    fn derived(&mut self, op: Op, value: Tensor, inputs: &[Var], aux: Vec<f64>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, Cow::Owned(value), rg, aux)
    }

    // ---- leaves ----

    /// An owned constant; no gradient flows to it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Cow::Owned(t), false, Vec::new())
    }

    /// A borrowed constant (images, class embeddings).
    pub fn input(&mut self, t: &'a Tensor) -> Var {
        self.push(Op::Leaf, Cow::Borrowed(t), false, Vec::new())
    }

    /// An owned leaf that receives a gradient, read back through
    /// [`Gradients::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, Cow::Owned(t), true, Vec::new())
    }

    /// A borrowed parameter. Only trainable parameters take part in the
    /// backward pass.
    pub fn param(&mut self, p: &'a Param) -> Var {
        let v = self.push(Op::Leaf, Cow::Borrowed(p.value()), p.is_trainable(), Vec::new());
        if p.is_trainable() {
            self.bindings.push((v, p.id()));
        }
        v
    }

    // ---- operations ----

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let s = self.value(v).shape();
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    /// `a @ b` for `a: [m, k]` (or `[k]`, treated as one row) and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sb.len() != 2 || sa.is_empty() || sa.len() > 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::Shape(alloc::format!("matmul {}", shape_list(&[&sa, &sb]))));
        }
        let (m, k) = self.matrix_dims(a);
        let n = sb[1];
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.derived(Op::MatMul(a, b), Tensor::from_parts(shape, out), &[a, b], Vec::new()))
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(alloc::format!("matmul_nt {}", shape_list(&[&sa, &sb]))));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[0]);
        let t = Tensor::from_parts(vec![sa[0], sb[0]], out);
        Ok(self.derived(Op::MatMulNt(a, b), t, &[a, b], Vec::new()))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(alloc::format!("{} {}", what, shape_list(&[sa, sb]))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(Op::Add(a, b), t, &[a, b], Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(Op::Sub(a, b), t, &[a, b], Vec::new()))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(Op::Mul(a, b), t, &[a, b], Vec::new()))
    }

    /// Adds the vector `b: [n]` to every row of `a: [.., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(b).shape() != [n] {
            let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
            return Err(Error::Shape(alloc::format!("add_row {}", shape_list(&[sa, sb]))));
        }
        let ta = self.value(a);
        let bias = self.value(b).data();
        let data = ta.data().chunks(n).flat_map(|r| r.iter().zip(bias).map(|(x, y)| x + y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.derived(Op::AddRow(a, b), t, &[a, b], Vec::new()))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.derived(Op::Affine { x, scale }, t, &[x], Vec::new())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    /// `max(0, x)`; the subgradient at exactly zero is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let kink = tx.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.min_kink = self.min_kink.min(kink);
        self.derived(Op::Relu(x), t, &[x], Vec::new())
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2))).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.derived(Op::Gelu(x), t, &[x], Vec::new())
    }

    /// Standardize along the last axis, then `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [n] {
                let (sx, sp) = (self.value(x).shape(), self.value(p).shape());
                return Err(Error::Shape(alloc::format!("layer_norm {}", shape_list(&[sx, sp]))));
            }
        }
        let tx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.len() / n;
        let mut out = vec![0.0; tx.len()];
        // aux layout: xhat (len) followed by one rstd per row.
        let mut aux = vec![0.0; tx.len() + rows];
        for (r, row) in tx.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / libm::sqrt(var + eps);
            aux[tx.len() + r] = rstd;
            for j in 0..n {
                let xh = (row[j] - mean) * rstd;
                aux[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.derived(Op::LayerNorm { x, gain, bias }, t, &[x, gain, bias], aux))
    }

    /// Softmax of `scale * x` along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var, scale: f64) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(scale * v));
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = libm::exp(scale * v - m);
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.derived(Op::Softmax { x, scale }, t, &[x], Vec::new())
    }

    /// Log-softmax of `scale * x` along the last axis.
    pub fn log_softmax(&mut self, x: Var, scale: f64) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let (arg, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(a, m), (i, &v)| if scale * v > m { (i, scale * v) } else { (a, m) });
            // log1p keeps the saturated case accurate
            let rest: f64 = row.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, &v)| libm::exp(scale * v - m)).sum();
            let lse = m + libm::log1p(rest);
            out.extend(row.iter().map(|&v| scale * v - lse));
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.derived(Op::LogSoftmax { x, scale }, t, &[x], Vec::new())
    }

    /// Stack row blocks (`[n]` vectors count as one row) into `[rows, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let n = self.value(*first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape().len() > 2 || t.last_dim() != n {
                return Err(Error::Shape(alloc::format!("concat_rows width {} vs {:?}", n, t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / n;
        let t = Tensor::from_parts(vec![rows, n], data);
        Ok(self.derived(Op::ConcatRows(parts.to_vec()), t, parts, Vec::new()))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(Error::Shape(alloc::format!("row {} of {:?}", i, s)));
        }
        let data = self.value(x).data()[i * s[1]..(i + 1) * s[1]].to_vec();
        Ok(self.derived(Op::Row(x, i), Tensor::from_parts(vec![s[1]], data), &[x], Vec::new()))
    }

    /// Flat element `i` as a scalar.
    pub fn element(&mut self, x: Var, i: usize) -> Result<Var> {
        let len = self.value(x).len();
        if i >= len {
            return Err(Error::Shape(alloc::format!("element {} of {} values", i, len)));
        }
        let v = self.value(x).data()[i];
        Ok(self.derived(Op::Element(x, i), Tensor::scalar(v), &[x], Vec::new()))
    }

    /// Gather scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::Shape("stack of nothing".into()));
        }
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if t.len() != 1 {
                return Err(Error::Shape(alloc::format!("stack expects scalars, got {:?}", t.shape())));
            }
            data.push(t.item());
        }
        let t = Tensor::from_parts(vec![scalars.len()], data);
        Ok(self.derived(Op::Stack(scalars.to_vec()), t, scalars, Vec::new()))
    }

    /// `x / |x|` for a vector.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 1 {
            return Err(Error::Shape(alloc::format!("l2_normalize expects a vector, got {:?}", tx.shape())));
        }
        let norm = tx.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateInput("feature has zero norm before normalization"));
        }
        let data = tx.data().iter().map(|v| v / norm).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.derived(Op::L2Normalize(x), t, &[x], vec![norm]))
    }

    /// `a.b / (|a| |b|)` for two vectors of equal length.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 {
            return Err(Error::Shape(alloc::format!("cosine expects vectors, got {:?}", ta.shape())));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateInput("cosine of a zero-norm vector"));
        }
        let c = dot(ta.data(), tb.data()) / (na * nb);
        Ok(self.derived(Op::CosineSimilarity(a, b), Tensor::scalar(c), &[a, b], vec![na, nb]))
    }

    /// `1 - cos(a, b)`, in `[0, 2]`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.cosine_similarity(a, b)?;
        Ok(self.affine(c, -1.0, 1.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Op::Sum(x), Tensor::scalar(s), &[x], Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.derived(Op::Mean(x), Tensor::scalar(s), &[x], Vec::new())
    }

    /// Sum of scalars, left to right.
    pub fn add_all(&mut self, scalars: &[Var]) -> Result<Var> {
        let s = self.stack(scalars)?;
        Ok(self.sum(s))
    }

    /// Mean of scalars.
    pub fn mean_all(&mut self, scalars: &[Var]) -> Result<Var> {
        let s = self.stack(scalars)?;
        Ok(self.mean(s))
    }

    // ---- backward ----

    /// Accumulate adjoints from a scalar root in reverse tape order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward from a non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_seeded(root, &[1.0])
    }

    /// Backward pass starting from an arbitrary node with the given adjoint.
    pub fn backward_seeded(&self, root: Var, seed: &[f64]) -> Result<Gradients> {
        if let Some(i) = self.non_finite {
            return Err(Error::NonFinite(alloc::format!("graph node {}", i)));
        }
        if seed.len() != self.value(root).len() {
            return Err(Error::shape(&[self.value(root).len()], &[seed.len()]));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(seed.to_vec());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            self.propagate(i, &dy, &mut adj);
            adj[i] = Some(dy);
        }
        let leaves = adj
            .into_iter()
            .enumerate()
            .map(|(i, a)| match self.nodes[i].op {
                Op::Leaf if self.nodes[i].requires_grad => a,
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, bindings: self.bindings.clone() })
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                let buf = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(*a);
                let n = self.value(*b).shape()[1];
                if wants(*a) {
                    let da = mm_nt(dy, val(*b), m, n, k);
                    acc(*a, &|buf| add_into(buf, &da));
                }
                if wants(*b) {
                    let db = mm_tn(val(*a), dy, m, k, n);
                    acc(*b, &|buf| add_into(buf, &db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.matrix_dims(*a);
                let n = self.value(*b).shape()[0];
                if wants(*a) {
                    let da = mm(dy, val(*b), m, n, k);
                    acc(*a, &|buf| add_into(buf, &da));
                }
                if wants(*b) {
                    let db = mm_tn(dy, val(*a), m, n, k);
                    acc(*b, &|buf| add_into(buf, &db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|buf| add_into(buf, dy));
                acc(*b, &|buf| add_into(buf, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|buf| add_into(buf, dy));
                acc(*b, &|buf| buf.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|buf| {
                    for ((g, d), y) in buf.iter_mut().zip(dy).zip(vb) {
                        *g += d * y;
                    }
                });
                acc(*b, &|buf| {
                    for ((g, d), x) in buf.iter_mut().zip(dy).zip(va) {
                        *g += d * x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &|buf| add_into(buf, dy));
                let n = self.value(*b).len();
                acc(*b, &|buf| {
                    for row in dy.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &|buf| buf.iter_mut().zip(dy).for_each(|(g, d)| *g += scale * d));
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &|buf| {
                    for ((g, d), v) in buf.iter_mut().zip(dy).zip(vx) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &|buf| {
                    for ((g, d), &v) in buf.iter_mut().zip(dy).zip(vx) {
                        let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
                        let pdf = libm::exp(-0.5 * v * v) * FRAC_1_SQRT_2PI;
                        *g += d * (cdf + v * pdf);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let n = self.value(*gain).len();
                let total = node.value.len();
                let (xhat, rstd) = node.aux.split_at(total);
                let g = val(*gain);
                if wants(*x) {
                    let mut dx = vec![0.0; total];
                    for (r, (dyr, xhr)) in dy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let dxh = dyr[j] * g[j];
                            mean_d += dxh;
                            mean_dx += dxh * xhr[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let dxh = dyr[j] * g[j];
                            dx[r * n + j] = rstd[r] * (dxh - mean_d - xhr[j] * mean_dx);
                        }
                    }
                    acc(*x, &|buf| add_into(buf, &dx));
                }
                acc(*gain, &|buf| {
                    for (dyr, xhr) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += dyr[j] * xhr[j];
                        }
                    }
                });
                acc(*bias, &|buf| {
                    for dyr in dy.chunks(n) {
                        add_into(buf, dyr);
                    }
                });
            }
            Op::Softmax { x, scale } => {
                let p = node.value.data();
                let n = node.value.last_dim();
                acc(*x, &|buf| {
                    for ((gr, dr), pr) in buf.chunks_mut(n).zip(dy.chunks(n)).zip(p.chunks(n)) {
                        let inner = dot(dr, pr);
                        for j in 0..n {
                            gr[j] += scale * pr[j] * (dr[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, scale } => {
                let ls = node.value.data();
                let n = node.value.last_dim();
                acc(*x, &|buf| {
                    for ((gr, dr), lr) in buf.chunks_mut(n).zip(dy.chunks(n)).zip(ls.chunks(n)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..n {
                            gr[j] += scale * (dr[j] - libm::exp(lr[j]) * total);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &dy[offset..offset + len];
                    acc(p, &|buf| add_into(buf, slice));
                    offset += len;
                }
            }
            Op::Row(x, r) => {
                let n = node.value.len();
                acc(*x, &|buf| add_into(&mut buf[r * n..(r + 1) * n], dy));
            }
            Op::Element(x, e) => {
                acc(*x, &|buf| buf[*e] += dy[0]);
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, &|buf| buf[0] += dy[k]);
                }
            }
            Op::L2Normalize(x) => {
                let y = node.value.data();
                let norm = node.aux[0];
                let inner = dot(y, dy);
                acc(*x, &|buf| {
                    for ((g, d), yv) in buf.iter_mut().zip(dy).zip(y) {
                        *g += (d - yv * inner) / norm;
                    }
                });
            }
            Op::CosineSimilarity(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (na, nb) = (node.aux[0], node.aux[1]);
                let c = node.value.item();
                let d = dy[0];
                acc(*a, &|buf| {
                    for ((g, x), y) in buf.iter_mut().zip(va).zip(vb) {
                        *g += d * (y / (na * nb) - c * x / (na * na));
                    }
                });
                acc(*b, &|buf| {
                    for ((g, y), x) in buf.iter_mut().zip(vb).zip(va) {
                        *g += d * (x / (na * nb) - c * y / (nb * nb));
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &|buf| buf.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &|buf| buf.iter_mut().for_each(|g| *g += dy[0] / n));
            }
        }
    }
}

/// Leaf adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Adjoint of a gradient-carrying leaf; `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of trainable parameters, in binding order. A parameter bound
    /// several times appears once per binding.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bindings.iter().filter_map(|(v, id)| self.grad(*v).map(|g| (*id, g)))
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn add_into(buf: &mut [f64], v: &[f64]) {
    buf.iter_mut().zip(v).for_each(|(g, d)| *g += d);
}

/// `[m, k] @ [k, n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `[m, k] @ [n, k]^T`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `[m, k]^T @ [m, n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;

    fn vecv(g: &mut Graph<'_>, v: &[f64]) -> Var {
        g.variable(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn cosine_distance_examples() {
        let mut g = Graph::new();
        let a = vecv(&mut g, &[1.0, 0.0]);
        let b = vecv(&mut g, &[0.0, 1.0]);
        let c = vecv(&mut g, &[1.0, 1.0]);
        let d_ab = g.cosine_distance(a, b).unwrap();
        let d_aa = g.cosine_distance(a, a).unwrap();
        let d_ac = g.cosine_distance(a, c).unwrap();
        assert_eq!(g.scalar(d_ab), 1.0);
        assert_eq!(g.scalar(d_aa), 0.0);
        assert!((g.scalar(d_ac) - 0.292_893_218_813_452_5).abs() < 1e-12);
        let z = vecv(&mut g, &[0.0, 0.0]);
        assert!(matches!(g.cosine_distance(a, z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cosine_grad_is_orthogonal_to_input() {
        let mut g = Graph::new();
        let a = vecv(&mut g, &[1.0, 0.0]);
        let other = g.constant(Tensor::vector(vec![0.6, 0.8]).unwrap());
        let d = g.cosine_distance(a, other).unwrap();
        let grads = g.backward(d).unwrap();
        let ga = grads.grad(a).unwrap();
        assert!(ga.iter().all(|v| v.is_finite()));
        assert!(ga[0].abs() < 1e-15, "component along a must vanish: {:?}", ga);
        assert!(ga[1].abs() > 0.1);
        // the detached copy a == a gives distance 0 with a zero gradient
        let mut g = Graph::new();
        let a = vecv(&mut g, &[1.0, 0.0]);
        let a_det = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        let d = g.cosine_distance(a, a_det).unwrap();
        let ga = g.backward(d).unwrap().grad(a).unwrap().to_vec();
        assert!(ga.iter().all(|v| v.is_finite()) && ga[0] == 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::ones(&[2]));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let c = g.constant(Tensor::filled(&[3, 4], 2.5));
        let ones4 = g.constant(Tensor::ones(&[4]));
        let zeros4 = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(c, ones4, zeros4, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bias = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 3.0]).unwrap());
        let x = g.constant(Tensor::matrix(2, 4, vec![1.0, 5.0, -2.0, 0.3, 7.0, 1.0, 1.0, 2.0]).unwrap());
        let y = g.layer_norm(x, zeros4, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 3.0, 0.5, -1.0, 2.0, 3.0]);

        let wrong = g.constant(Tensor::ones(&[3]));
        assert!(g.layer_norm(x, wrong, bias, 1e-5).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let p = g.softmax(x, 1.0);
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(vec![libm::log(2.0), 0.0]).unwrap());
        let p = g.softmax(x, 1.0);
        let d = g.value(p).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = g.constant(Tensor::filled(&[5], 1e300));
        let p = g.softmax(x, 1.0);
        assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let b = store.add("b", Tensor::vector(vec![0.1, 0.2]).unwrap(), false);
        let grads = {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(vec![1.0, -1.0]).unwrap());
            let wv = g.param(store.get(w));
            let bv = g.param(store.get(b));
            let h = g.matmul(x, wv).unwrap();
            let h = g.add(h, bv).unwrap();
            let h = g.gelu(h);
            let s = g.sum(h);
            g.backward(s).unwrap()
        };
        store.accumulate(&grads);
        assert_eq!(grads.param_grads().count(), 0);
        assert!(store.iter().all(|p| p.grad().data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[-2.0, -2.0]);
        let v = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap());
        let c = g.matmul(v, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1]);
        let ct = g.matmul_nt(a, a).unwrap();
        assert_eq!(g.value(ct).data(), &[14.0, 32.0, 32.0, 77.0]);
        assert!(g.matmul(a, a).is_err());
    }
}
