//! One optimization step of either training objective.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::make_shuffled_triplet;
use crate::data::Dataset;
use crate::encoder::{Branch, Encoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    objective_fg, objective_zs, ClassEmbeddingTable, LossWeights, ShuffledFeatures, TermValues, TripletFeatures,
};
use crate::optim::Adam;
use crate::sampler::{sample_category_triplets_from, sample_hard_triplets_from, Pool, TripletBatch};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Zs,
    Fg,
}

/// Batch shape and objective of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub mode: TrainMode,
    /// Category-level batch size (zs).
    pub batch_size: usize,
    /// Categories per hard batch (fg).
    pub categories_per_batch: usize,
    /// Triplets per category in a hard batch (fg).
    pub triplets_per_category: usize,
    /// Patch-shuffle grid side.
    pub shuffle_grid: usize,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub terms: TermValues,
    pub delta_degenerate: bool,
    pub batch: TripletBatch,
}

/// Sampler stream of step `step`; depends only on the seed and the index
/// so resumed runs draw the same batches.
pub fn sample_step_batch(
    dataset: &Dataset,
    pool: &Pool,
    cfg: &StepConfig,
    sampler_seed: u64,
    step: u64,
) -> Result<(TripletBatch, seed::LabRng)> {
    let mut rng = seed::rng(sampler_seed, &[0x5354_4550, step]);
    let batch = match cfg.mode {
        TrainMode::Zs => sample_category_triplets_from(dataset, pool, cfg.batch_size, &mut rng)?,
        TrainMode::Fg => {
            sample_hard_triplets_from(dataset, pool, cfg.categories_per_batch, cfg.triplets_per_category, &mut rng)?
        }
    };
    for id in batch.item_ids() {
        let it = dataset.item(id).ok_or_else(|| Error::Usage(format!("batch item {} not in dataset", id)))?;
        if !pool.contains(it.category, it.instance) {
            return Err(Error::Usage(format!("batch item {} lies outside the training pool", id)));
        }
    }
    Ok((batch, rng))
}

/// Features of each distinct item, encoded once per branch.
struct FeatureCache {
    sketches: BTreeMap<u32, Var>,
    photos: BTreeMap<u32, Var>,
}

impl FeatureCache {
    fn get<'g>(&mut self, g: &mut Graph<'g>, enc: &'g Encoder, dataset: &Dataset, id: u32, branch: Branch) -> Result<Var> {
        let map = match branch {
            Branch::Sketch => &mut self.sketches,
            Branch::Photo => &mut self.photos,
        };
        if let Some(&v) = map.get(&id) {
            return Ok(v);
        }
        let item = dataset.item(id).ok_or_else(|| Error::Usage(format!("unknown item {}", id)))?;
        let v = enc.encode_in(g, &item.image, branch)?;
        map.insert(id, v);
        Ok(v)
    }
}

/// Build the objective for one batch. Returns the graph-side terms.
pub fn build_objective<'g>(
    g: &mut Graph<'g>,
    encoder: &'g Encoder,
    dataset: &Dataset,
    batch: &TripletBatch,
    table: &'g ClassEmbeddingTable,
    cfg: &StepConfig,
    rng: &mut seed::LabRng,
) -> Result<crate::losses::ObjectiveTerms> {
    let mut cache = FeatureCache { sketches: BTreeMap::new(), photos: BTreeMap::new() };
    let mut f = TripletFeatures::default();
    for t in &batch.triplets {
        f.anchors.push(cache.get(g, encoder, dataset, t.anchor, Branch::Sketch)?);
        f.positives.push(cache.get(g, encoder, dataset, t.positive, Branch::Photo)?);
        f.negatives.push(cache.get(g, encoder, dataset, t.negative, Branch::Photo)?);
        f.anchor_labels.push(t.anchor_category);
        f.positive_labels.push(t.anchor_category);
        f.negative_labels.push(t.negative_category);
    }
    match cfg.mode {
        TrainMode::Zs => objective_zs(g, &f, table, &cfg.weights),
        TrainMode::Fg => {
            let groups: Vec<Vec<usize>> = batch.groups.iter().map(|(_, idx)| idx.clone()).collect();
            let mut shuffled = ShuffledFeatures::default();
            if cfg.weights.lambda4 != 0.0 {
                for t in &batch.triplets {
                    let s = &dataset.item(t.anchor).expect("sampled").image;
                    let p = &dataset.item(t.positive).expect("sampled").image;
                    let st = make_shuffled_triplet(s, p, cfg.shuffle_grid, rng)?;
                    shuffled.sketches.push(encoder.encode_in(g, &st.sketch_g1, Branch::Sketch)?);
                    shuffled.matched.push(encoder.encode_in(g, &st.photo_g1, Branch::Photo)?);
                    shuffled.mismatched.push(encoder.encode_in(g, &st.photo_g2, Branch::Photo)?);
                }
            }
            objective_fg(g, &f, &groups, &shuffled, table, &cfg.weights)
        }
    }
}

/// Sample, forward, backward and apply one Adam update.
pub fn train_step(
    encoder: &mut Encoder,
    optimizer: &mut Adam,
    dataset: &Dataset,
    pool: &Pool,
    table: &ClassEmbeddingTable,
    cfg: &StepConfig,
    sampler_seed: u64,
    step: u64,
) -> Result<StepOutcome> {
    let (batch, mut rng) = sample_step_batch(dataset, pool, cfg, sampler_seed, step)?;
    let (terms, degenerate, grads) = {
        let enc: &Encoder = encoder;
        let mut g = Graph::new();
        let obj = build_objective(&mut g, enc, dataset, &batch, table, cfg, &mut rng)?;
        if let Some(i) = g.first_non_finite() {
            return Err(Error::NonFinite(format!("node {} of the step {} objective", i, step)));
        }
        let grads = g.backward(obj.total)?;
        (obj.values(&g), obj.delta_degenerate, grads)
    };
    let store = encoder.store_mut();
    store.accumulate(&grads);
    let res = optimizer.step(store);
    store.zero_grad();
    res?;
    Ok(StepOutcome { terms, delta_degenerate: degenerate, batch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, split_zero_shot, DatasetSpec};
    use crate::encoder::{EncoderConfig, EncoderMode};

    fn tiny() -> (Dataset, Pool, Encoder, ClassEmbeddingTable) {
        let spec = DatasetSpec { num_categories: 4, instances_per_category: 3, sketches_per_instance: 1, image_size: 12, seed: 2 };
        let d = generate_dataset(&spec).unwrap();
        let split = split_zero_shot(&d.categories(), 1, 0).unwrap();
        let pool = Pool::seen(&d, &split);
        let cfg = EncoderConfig {
            image_size: 12,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 1,
            mlp_dim: 8,
            feature_dim: 4,
            prompt_count: 2,
            mode: EncoderMode::Shared,
            ln_eps: 1e-5,
        };
        let enc = Encoder::build(cfg, 1).unwrap();
        let table = ClassEmbeddingTable::pseudo(&split.seen, 4, 0.07).unwrap();
        (d, pool, enc, table)
    }

    fn step_cfg(mode: TrainMode) -> StepConfig {
        StepConfig {
            mode,
            batch_size: 4,
            categories_per_batch: 2,
            triplets_per_category: 2,
            shuffle_grid: 2,
            weights: LossWeights::default(),
        }
    }

    #[test]
    fn steps_move_only_trainables_and_are_deterministic() {
        for mode in [TrainMode::Zs, TrainMode::Fg] {
            let (d, pool, mut enc, table) = tiny();
            let frozen = enc.store().frozen_digest();
            let train_ids = enc.trainable_parameters();
            let before = enc.store().digest(&train_ids);
            let mut opt = Adam::new(enc.store(), 1e-2);
            let cfg = step_cfg(mode);
            let a = train_step(&mut enc, &mut opt, &d, &pool, &table, &cfg, 5, 0).unwrap();
            assert_eq!(enc.store().frozen_digest(), frozen);
            assert_ne!(enc.store().digest(&train_ids), before);
            let t = a.terms;
            let w = &cfg.weights;
            let sum = match mode {
                TrainMode::Zs => t.l_tri + w.lambda1 * (t.l_cls_s + t.l_cls_p),
                TrainMode::Fg => t.l_tri + w.lambda2 * (t.l_cls_s + t.l_cls_p) + w.lambda3 * t.l_delta + w.lambda4 * t.l_ps,
            };
            assert!((sum - t.total).abs() < 1e-9);

            let (d2, pool2, mut enc2, table2) = tiny();
            let mut opt2 = Adam::new(enc2.store(), 1e-2);
            let b = train_step(&mut enc2, &mut opt2, &d2, &pool2, &table2, &cfg, 5, 0).unwrap();
            assert_eq!(a, b);
            assert_eq!(enc.store().digest(&train_ids), enc2.store().digest(&train_ids));
        }
    }
}
