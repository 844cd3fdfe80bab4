//! Toy patch transformer with shallow prompt injection.
//!
//! The backbone (patch projection, positional embeddings, class token,
//! attention and MLP weights, output projection) is randomly initialized and
//! frozen. Trainable state is restricted to the prompt vectors and the gain
//! and bias of every LayerNorm, one set per branch in dual-branch mode and a
//! single shared set otherwise.
//!
//! Token layout entering the first block is
//! `[patch embeddings + positions, class token + position, prompts]`; the
//! feature is read from the class token only.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::seed::{self, LabRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Separate sketch and photo prompts and LayerNorm sets.
    DualBranch,
    /// One prompt and one LayerNorm set for both modalities.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Sketch,
    Photo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub feature_dim: usize,
    pub prompt_count: usize,
    pub mode: EncoderMode,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 1,
            mlp_dim: 128,
            feature_dim: 32,
            prompt_count: 3,
            mode: EncoderMode::DualBranch,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(1..=8).contains(&self.prompt_count) {
            return err(format!("prompt_count {} outside 1..=8", self.prompt_count));
        }
        if self.feature_dim < 2 {
            return err(format!("feature_dim {} must be at least 2", self.feature_dim));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.mlp_dim == 0 {
            return err("depth, embed_dim and mlp_dim must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(format!("heads {} must divide embed_dim {}", self.heads, self.embed_dim));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return err("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_branches(&self) -> usize {
        match self.mode {
            EncoderMode::DualBranch => 2,
            EncoderMode::Shared => 1,
        }
    }

    /// LayerNorm layers per branch: pre-transformer, two per block, final.
    pub fn num_layer_norms(&self) -> usize {
        2 * self.depth + 2
    }

    /// Scalar count of trainable values over all branches.
    pub fn trainable_count(&self) -> usize {
        let per_branch = self.prompt_count * self.embed_dim + self.num_layer_norms() * 2 * self.embed_dim;
        per_branch * self.num_branches()
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Head {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    heads: Vec<Head>,
    fc1: ParamId,
    fc1_bias: ParamId,
    fc2: ParamId,
    fc2_bias: ParamId,
}

#[derive(Debug, Clone)]
struct BranchParams {
    prompts: ParamId,
    // ln_pre, (ln1, ln2) per block, ln_post
    norms: Vec<Norm>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    patch_proj: ParamId,
    positions: ParamId,
    class_token: ParamId,
    blocks: Vec<Block>,
    projection: ParamId,
    branches: Vec<BranchParams>,
}

fn normal_tensor(rng: &mut LabRng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal draws")
}

fn branch_tag(b: usize, mode: EncoderMode) -> &'static str {
    match (mode, b) {
        (EncoderMode::Shared, _) => "shared",
        (_, 0) => "sketch",
        _ => "photo",
    }
}

impl Encoder {
    /// Deterministic construction: every tensor is drawn from one stream
    /// seeded by `seed`, frozen weights first, then prompts.
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Encoder> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[0x454e_434f]);
        let d = config.embed_dim;
        let pp = config.patch_size * config.patch_size;
        let m = config.num_patches();
        let dh = d / config.heads;
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);

        let mut store = ParamStore::new();
        let patch_proj = store.add("patch_proj", normal_tensor(&mut rng, &[pp, d], inv(pp) * 4.0), false);
        let positions = store.add("positions", normal_tensor(&mut rng, &[m + 1, d], 0.5), false);
        let class_token = store.add("class_token", normal_tensor(&mut rng, &[d], 1.0), false);
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let mut w = |name: &str, shape: &[usize], std: f64| {
                    store.add(format!("block{}.head{}.{}", l, h, name), normal_tensor(&mut rng, shape, std), false)
                };
                let q = w("q", &[d, dh], inv(d));
                let k = w("k", &[d, dh], inv(d));
                let v = w("v", &[d, dh], inv(d));
                let o = w("o", &[dh, d], inv(d));
                heads.push(Head { q, k, v, o });
            }
            let fc1 = store.add(format!("block{}.fc1", l), normal_tensor(&mut rng, &[d, config.mlp_dim], inv(d)), false);
            let fc1_bias = store.add(format!("block{}.fc1_bias", l), normal_tensor(&mut rng, &[config.mlp_dim], 0.1), false);
            let fc2 = store.add(
                format!("block{}.fc2", l),
                normal_tensor(&mut rng, &[config.mlp_dim, d], inv(config.mlp_dim)),
                false,
            );
            let fc2_bias = store.add(format!("block{}.fc2_bias", l), normal_tensor(&mut rng, &[d], 0.1), false);
            blocks.push(Block { heads, fc1, fc1_bias, fc2, fc2_bias });
        }
        let projection = store.add("projection", normal_tensor(&mut rng, &[d, config.feature_dim], inv(d)), false);

        let mut branches = Vec::with_capacity(config.num_branches());
        for b in 0..config.num_branches() {
            let tag = branch_tag(b, config.mode);
            let prompts = store.add(
                format!("{}.prompts", tag),
                normal_tensor(&mut rng, &[config.prompt_count, d], 0.02),
                true,
            );
            let norms = (0..config.num_layer_norms())
                .map(|i| Norm {
                    gain: store.add(format!("{}.ln{}.gain", tag, i), Tensor::ones(&[d]), true),
                    bias: store.add(format!("{}.ln{}.bias", tag, i), Tensor::zeros(&[d]), true),
                })
                .collect();
            branches.push(BranchParams { prompts, norms });
        }
        Ok(Encoder { config, store, patch_proj, positions, class_token, blocks, projection, branches })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn branch(&self, branch: Branch) -> &BranchParams {
        match (self.config.mode, branch) {
            (EncoderMode::Shared, _) | (EncoderMode::DualBranch, Branch::Sketch) => &self.branches[0],
            (EncoderMode::DualBranch, Branch::Photo) => &self.branches[1],
        }
    }

    pub fn prompt_param(&self, branch: Branch) -> ParamId {
        self.branch(branch).prompts
    }

    /// Prompts first (one per branch), then LayerNorm gain/bias pairs in
    /// layer order, branches interleaved within each layer.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.branches.iter().map(|b| b.prompts).collect();
        for i in 0..self.config.num_layer_norms() {
            for b in &self.branches {
                out.push(b.norms[i].gain);
                out.push(b.norms[i].bias);
            }
        }
        out
    }

    /// Append the forward pass for one image to `g` and return the
    /// unit-norm feature.
    pub fn encode_in<'g>(&'g self, g: &mut Graph<'g>, image: &Tensor, branch: Branch) -> Result<Var> {
        let cfg = &self.config;
        let bp = self.branch(branch);
        let p = |id: ParamId| self.store.get(id);
        let eps = cfg.ln_eps;

        let patches = g.constant(patchify(image, cfg.image_size, cfg.patch_size)?);
        let proj = g.param(p(self.patch_proj));
        let emb = g.matmul(patches, proj)?;
        let cls = g.param(p(self.class_token));
        let tokens = g.concat_rows(&[emb, cls])?;
        let pos = g.param(p(self.positions));
        let tokens = g.add(tokens, pos)?;
        let prompts = g.param(p(bp.prompts));
        let mut x = g.concat_rows(&[tokens, prompts])?;

        let norm = |g: &mut Graph<'g>, x: Var, n: Norm| -> Result<Var> {
            let gain = g.param(p(n.gain));
            let bias = g.param(p(n.bias));
            g.layer_norm(x, gain, bias, eps)
        };
        x = norm(g, x, bp.norms[0])?;
        let dh = cfg.embed_dim / cfg.heads;
        let att_scale = 1.0 / libm::sqrt(dh as f64);
        for (l, block) in self.blocks.iter().enumerate() {
            let h = norm(g, x, bp.norms[1 + 2 * l])?;
            let mut outs = Vec::with_capacity(block.heads.len());
            for head in &block.heads {
                let wq = g.param(p(head.q));
                let wk = g.param(p(head.k));
                let wv = g.param(p(head.v));
                let wo = g.param(p(head.o));
                let q = g.matmul(h, wq)?;
                let k = g.matmul(h, wk)?;
                let v = g.matmul(h, wv)?;
                let scores = g.matmul_nt(q, k)?;
                let attn = g.softmax(scores, att_scale);
                let ctx = g.matmul(attn, v)?;
                outs.push(g.matmul(ctx, wo)?);
            }
            for o in outs {
                x = g.add(x, o)?;
            }
            let h = norm(g, x, bp.norms[2 + 2 * l])?;
            let w1 = g.param(p(block.fc1));
            let b1 = g.param(p(block.fc1_bias));
            let w2 = g.param(p(block.fc2));
            let b2 = g.param(p(block.fc2_bias));
            let u = g.matmul(h, w1)?;
            let u = g.add_row(u, b1)?;
            let u = g.gelu(u);
            let u = g.matmul(u, w2)?;
            let u = g.add_row(u, b2)?;
            x = g.add(x, u)?;
        }
        let cls_out = g.row(x, cfg.num_patches())?;
        let last = *bp.norms.last().expect("at least one norm");
        let cls_out = norm(g, cls_out, last)?;
        let wp = g.param(p(self.projection));
        let f = g.matmul(cls_out, wp)?;
        g.l2_normalize(f)
    }

    /// Unit-norm feature of one image.
    pub fn encode(&self, image: &Tensor, branch: Branch) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.encode_in(&mut g, image, branch)?;
        if let Some(i) = g.first_non_finite() {
            return Err(Error::NonFinite(format!("encoder node {}", i)));
        }
        Ok(g.value(f).clone())
    }
}

/// Split a square `[H, W]` image into row-major `[m, patch * patch]`
/// patches, left to right then top to bottom.
pub fn patchify(image: &Tensor, image_size: usize, patch: usize) -> Result<Tensor> {
    if image.shape() != [image_size, image_size] {
        return Err(Error::shape(&[image_size, image_size], image.shape()));
    }
    if patch == 0 || image_size % patch != 0 {
        return Err(Error::Config(format!("patch {} does not divide {}", patch, image_size)));
    }
    let grid = image_size / patch;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..grid {
        for gx in 0..grid {
            for y in 0..patch {
                let row = (gy * patch + y) * image_size + gx * patch;
                out.extend_from_slice(&src[row..row + patch]);
            }
        }
    }
    Tensor::new(alloc::vec![grid * grid, patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, image_size: usize, patch: usize) -> Result<Tensor> {
    let grid = image_size / patch;
    if patch == 0 || image_size % patch != 0 || patches.shape() != [grid * grid, patch * patch] {
        return Err(Error::shape(&[grid * grid, patch * patch], patches.shape()));
    }
    let src = patches.data();
    let mut out = alloc::vec![0.0; image_size * image_size];
    for gy in 0..grid {
        for gx in 0..grid {
            let k = gy * grid + gx;
            for y in 0..patch {
                let dst = (gy * patch + y) * image_size + gx * patch;
                let s = k * patch * patch + y * patch;
                out[dst..dst + patch].copy_from_slice(&src[s..s + patch]);
            }
        }
    }
    Tensor::new(alloc::vec![image_size, image_size], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(mode: EncoderMode) -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_dim: 16,
            feature_dim: 4,
            prompt_count: 3,
            mode,
            ln_eps: 1e-5,
        }
    }

    fn image(seed_: u64, size: usize) -> Tensor {
        let mut r = seed::rng(seed_, &[]);
        Tensor::new(alloc::vec![size, size], (0..size * size).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = small(EncoderMode::Shared);
        assert!(c.validate().is_ok());
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = small(EncoderMode::Shared);
        c.prompt_count = 0;
        assert!(Encoder::build(c, 1).is_err());
        let mut c = small(EncoderMode::Shared);
        c.feature_dim = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patchify_examples() {
        let img = Tensor::new(alloc::vec![4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&img, 4, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        let whole = patchify(&img, 4, 4).unwrap();
        assert_eq!(whole.shape(), &[1, 16]);
        assert_eq!(whole.data(), img.data());
        assert!(patchify(&img, 8, 2).is_err());
    }

    #[test]
    fn build_is_deterministic_and_counts_trainables() {
        let a = Encoder::build(small(EncoderMode::DualBranch), 3).unwrap();
        let b = Encoder::build(small(EncoderMode::DualBranch), 3).unwrap();
        let c = Encoder::build(small(EncoderMode::DualBranch), 4).unwrap();
        assert_eq!(a.store(), b.store());
        assert_ne!(a.store().get(a.patch_proj).value(), c.store().get(c.patch_proj).value());
        let count: usize = a.trainable_parameters().iter().map(|&id| a.store().get(id).value().len()).sum();
        // K d_p + (2L + 2) LN layers * 2 d_p, per branch
        assert_eq!(count, 2 * (3 * 8 + 6 * 2 * 8));
        assert_eq!(count, a.config().trainable_count());
        let s = Encoder::build(small(EncoderMode::Shared), 3).unwrap();
        assert_eq!(a.trainable_parameters().len(), 2 * s.trainable_parameters().len());
    }

    #[test]
    fn trainables_exclude_backbone() {
        let e = Encoder::build(small(EncoderMode::DualBranch), 3).unwrap();
        let t = e.trainable_parameters();
        assert_eq!(t[0], e.prompt_param(Branch::Sketch));
        assert_eq!(t[1], e.prompt_param(Branch::Photo));
        let mut sorted = t.clone();
        sorted.sort();
        assert_eq!(sorted, e.store().trainable_ids());
        for id in e.store().frozen_ids() {
            assert!(!t.contains(&id));
        }
    }

    #[test]
    fn encode_unit_norm_and_shared_branches() {
        let e = Encoder::build(small(EncoderMode::Shared), 9).unwrap();
        for s in 0..5 {
            let img = image(s, 8);
            let f = e.encode(&img, Branch::Sketch).unwrap();
            assert_eq!(f.shape(), &[4]);
            assert!((f.norm() - 1.0).abs() < 1e-9);
            assert_eq!(f, e.encode(&img, Branch::Photo).unwrap());
        }
        assert!(e.encode(&image(0, 4), Branch::Photo).is_err());
    }

    #[test]
    fn prompts_influence_the_feature() {
        let mut e = Encoder::build(small(EncoderMode::DualBranch), 2).unwrap();
        let img = image(5, 8);
        let before = e.encode(&img, Branch::Sketch).unwrap();
        let photo_before = e.encode(&img, Branch::Photo).unwrap();
        let id = e.prompt_param(Branch::Sketch);
        let mut v = e.store().get(id).value().data().to_vec();
        v[0] += 1e-3;
        e.store_mut().set_value(id, &v).unwrap();
        let after = e.encode(&img, Branch::Sketch).unwrap();
        assert!(before.data().iter().zip(after.data()).any(|(a, b)| (a - b).abs() > 1e-9));
        assert_eq!(photo_before, e.encode(&img, Branch::Photo).unwrap());
    }
}
