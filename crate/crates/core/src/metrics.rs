//! Ranking and retrieval metrics.
//!
//! Truncated AP at cutoff `K` averages precision over the relevant ranks
//! `r <= K` and divides by `min(R, K)`, where `R` counts relevant items in
//! the whole gallery. P@K always divides by `K`. Ties in distance are broken
//! by ascending item id.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality};
use crate::encoder::{Branch, Encoder};
use crate::error::{Error, Result};
use crate::sampler::Pool;
use crate::tensor::cosine_distance;

/// Truncation convention declared in every report.
pub const CONVENTION: &str =
    "ap@k: mean precision over relevant ranks <= k, divided by min(relevant in gallery, k); p@k: hits in top k / k; ties by ascending item id";

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: u32,
    pub ids: Vec<u32>,
    pub distances: Vec<f64>,
}

impl RankedList {
    pub fn relevance(&self, mut relevant: impl FnMut(u32) -> bool) -> Vec<bool> {
        self.ids.iter().map(|&id| relevant(id)).collect()
    }

    /// 1-based rank of `id`.
    pub fn rank_of(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&g| g == id).map(|p| p + 1)
    }
}

/// Sort the gallery by ascending cosine distance to the query.
pub fn rank_gallery(query_id: u32, query: &[f64], gallery: &[(u32, &[f64])]) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut scored = gallery
        .iter()
        .map(|&(id, f)| Ok((cosine_distance(query, f)?, id)))
        .collect::<Result<Vec<(f64, u32)>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankedList {
        query: query_id,
        ids: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub value: f64,
    /// No relevant item anywhere in the gallery; `value` is 0.
    pub no_relevant: bool,
}

pub fn average_precision(relevance: &[bool], cutoff: Option<usize>) -> ApResult {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return ApResult { value: 0.0, no_relevant: true };
    }
    let k = cutoff.unwrap_or(relevance.len()).min(relevance.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance[..k].iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denom = match cutoff {
        Some(k) => total.min(k),
        None => total,
    };
    ApResult { value: sum / denom as f64, no_relevant: false }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionResult {
    pub value: f64,
    /// The gallery held fewer than `k` items.
    pub short_gallery: bool,
}

pub fn precision_at_k(relevance: &[bool], k: usize) -> Result<PrecisionResult> {
    if k == 0 {
        return Err(Error::Config("precision cutoff must be at least 1".into()));
    }
    let hits = relevance.iter().take(k).filter(|&&r| r).count();
    Ok(PrecisionResult { value: hits as f64 / k as f64, short_gallery: relevance.len() < k })
}

/// Fraction of 1-based ranks within `q`.
pub fn acc_at_q(ranks: &[usize], q: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= q).count() as f64 / ranks.len() as f64
}

/// Cutoffs reported by `evaluate_*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub map_k: Vec<usize>,
    pub p_k: Vec<usize>,
    pub acc_q: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { map_k: alloc::vec![200], p_k: alloc::vec![100, 200], acc_q: alloc::vec![1, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub queries: usize,
    pub gallery: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_all: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub acc: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub convention: String,
    pub queries: usize,
    pub gallery: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_all: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub map_at_k: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub p_at_k: BTreeMap<String, f64>,
    /// Macro-averaged over categories.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub acc_at_q: BTreeMap<String, f64>,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub no_relevant_queries: usize,
    /// Cutoffs larger than the gallery.
    pub short_gallery_cutoffs: Vec<usize>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

impl MetricsReport {
    pub fn acc(&self, q: usize) -> Option<f64> {
        self.acc_at_q.get(&q.to_string()).copied()
    }

    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.map_at_k.get(&k.to_string()).copied()
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.p_at_k.get(&k.to_string()).copied()
    }
}

/// Feature vectors keyed by item id.
pub type Features = BTreeMap<u32, Vec<f64>>;

/// Encode items with the branch matching their modality.
pub fn encode_items(encoder: &Encoder, dataset: &Dataset, ids: &[u32]) -> Result<Features> {
    let mut out = Features::new();
    for &id in ids {
        let it = dataset.item(id).ok_or_else(|| Error::Usage(format!("unknown item {}", id)))?;
        let branch = match it.modality {
            Modality::Sketch => Branch::Sketch,
            Modality::Photo => Branch::Photo,
        };
        out.insert(id, encoder.encode(&it.image, branch)?.into_data());
    }
    Ok(out)
}

/// Encode every sketch and photo of the pool.
pub fn encode_pool(encoder: &Encoder, dataset: &Dataset, pool: &Pool) -> Result<Features> {
    let mut ids = pool.sketch_ids(dataset);
    ids.extend(pool.photo_ids(dataset));
    ids.sort_unstable();
    encode_items(encoder, dataset, &ids)
}

fn feature<'f>(features: &'f Features, id: u32, dim: usize) -> Result<&'f [f64]> {
    let f = features.get(&id).ok_or_else(|| Error::Usage(format!("no feature for item {}", id)))?;
    if f.len() != dim {
        return Err(Error::shape(&[dim], &[f.len()]));
    }
    Ok(f)
}

fn feature_dim(features: &Features) -> Result<usize> {
    features.values().next().map(|f| f.len()).ok_or(Error::EmptyGallery)
}

/// Category-level retrieval: every pool sketch queries all pool photos;
/// relevant means same category.
pub fn evaluate_zs(dataset: &Dataset, pool: &Pool, features: &Features, opts: &EvalOptions) -> Result<MetricsReport> {
    let dim = feature_dim(features)?;
    let photo_ids = pool.photo_ids(dataset);
    let gallery = photo_ids
        .iter()
        .map(|&id| Ok((id, feature(features, id, dim)?)))
        .collect::<Result<Vec<_>>>()?;
    let category = |id: u32| dataset.item(id).expect("pool item").category;
    let queries = pool.sketch_ids(dataset);
    if queries.is_empty() {
        return Err(Error::InsufficientData("no queries".into()));
    }
    let mut ap_all = Vec::with_capacity(queries.len());
    let mut ap_k: Vec<Vec<f64>> = alloc::vec![Vec::new(); opts.map_k.len()];
    let mut p_k: Vec<Vec<f64>> = alloc::vec![Vec::new(); opts.p_k.len()];
    let mut per_cat: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut no_rel = 0;
    for &q in &queries {
        let qc = category(q);
        let ranked = rank_gallery(q, feature(features, q, dim)?, &gallery)?;
        let rel = ranked.relevance(|id| category(id) == qc);
        let ap = average_precision(&rel, None);
        no_rel += ap.no_relevant as usize;
        ap_all.push(ap.value);
        per_cat.entry(qc).or_default().push(ap.value);
        for (i, &k) in opts.map_k.iter().enumerate() {
            ap_k[i].push(average_precision(&rel, Some(k)).value);
        }
        for (i, &k) in opts.p_k.iter().enumerate() {
            p_k[i].push(precision_at_k(&rel, k)?.value);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let n_gallery = gallery.len();
    let mut short: Vec<usize> = opts.map_k.iter().chain(&opts.p_k).copied().filter(|&k| k > n_gallery).collect();
    short.sort_unstable();
    short.dedup();
    Ok(MetricsReport {
        mode: "zs".into(),
        convention: CONVENTION.into(),
        queries: queries.len(),
        gallery: n_gallery,
        map_all: Some(mean(&ap_all)),
        map_at_k: opts.map_k.iter().zip(&ap_k).map(|(k, v)| (k.to_string(), mean(v))).collect(),
        p_at_k: opts.p_k.iter().zip(&p_k).map(|(k, v)| (k.to_string(), mean(v))).collect(),
        acc_at_q: BTreeMap::new(),
        per_category: per_cat
            .into_iter()
            .map(|(c, v)| {
                let gallery = gallery.iter().filter(|(id, _)| category(*id) == c).count();
                (c.to_string(), CategoryMetrics { queries: v.len(), gallery, map_all: Some(mean(&v)), acc: BTreeMap::new() })
            })
            .collect(),
        no_relevant_queries: no_rel,
        short_gallery_cutoffs: short,
        config_hash: String::new(),
        seeds: BTreeMap::new(),
    })
}

/// Instance-level retrieval one category at a time: each sketch queries
/// the photos of its own category and succeeds at `q` when its paired photo
/// ranks within `q`. Accuracies are macro-averaged over categories.
pub fn evaluate_fg(dataset: &Dataset, pool: &Pool, features: &Features, opts: &EvalOptions) -> Result<MetricsReport> {
    let dim = feature_dim(features)?;
    let mut per_category = BTreeMap::new();
    let mut macro_acc: Vec<Vec<f64>> = alloc::vec![Vec::new(); opts.acc_q.len()];
    let (mut n_queries, mut n_gallery) = (0, 0);
    for c in pool.categories() {
        let photos: Vec<u32> =
            pool.instances(c).iter().filter_map(|&i| dataset.photo(c, i)).map(|p| p.id).collect();
        let gallery = photos.iter().map(|&id| Ok((id, feature(features, id, dim)?))).collect::<Result<Vec<_>>>()?;
        let mut ranks = Vec::new();
        for &i in pool.instances(c) {
            let truth = dataset.photo(c, i).map(|p| p.id);
            for s in dataset.sketches(c, i) {
                let ranked = rank_gallery(s.id, feature(features, s.id, dim)?, &gallery)?;
                let r = truth.and_then(|t| ranked.rank_of(t)).ok_or(Error::MissingMatch { query: s.id })?;
                ranks.push(r);
            }
        }
        if ranks.is_empty() {
            continue;
        }
        let mut acc = BTreeMap::new();
        for (j, &q) in opts.acc_q.iter().enumerate() {
            let a = acc_at_q(&ranks, q);
            macro_acc[j].push(a);
            acc.insert(q.to_string(), a);
        }
        n_queries += ranks.len();
        n_gallery += gallery.len();
        per_category.insert(c.to_string(), CategoryMetrics { queries: ranks.len(), gallery: gallery.len(), map_all: None, acc });
    }
    if n_queries == 0 {
        return Err(Error::InsufficientData("no queries".into()));
    }
    Ok(MetricsReport {
        mode: "fg".into(),
        convention: CONVENTION.into(),
        queries: n_queries,
        gallery: n_gallery,
        map_all: None,
        map_at_k: BTreeMap::new(),
        p_at_k: BTreeMap::new(),
        acc_at_q: opts
            .acc_q
            .iter()
            .zip(&macro_acc)
            .map(|(q, v)| (q.to_string(), v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
        per_category,
        no_relevant_queries: 0,
        short_gallery_cutoffs: Vec::new(),
        config_hash: String::new(),
        seeds: BTreeMap::new(),
    })
}

/// Per category, the mean relative distance `d(s, p_i) - d(s, p_j)` over
/// its sketches `s` of instance `i` and every other instance `j`.
pub fn category_delta_means(dataset: &Dataset, pool: &Pool, features: &Features) -> Result<BTreeMap<u32, f64>> {
    let dim = feature_dim(features)?;
    let mut out = BTreeMap::new();
    for c in pool.categories() {
        let inst = pool.instances(c);
        let (mut sum, mut n) = (0.0, 0usize);
        for &i in inst {
            let pi = dataset.photo(c, i).ok_or(Error::MissingMatch { query: i })?;
            for s in dataset.sketches(c, i) {
                let fs = feature(features, s.id, dim)?;
                let dp = cosine_distance(fs, feature(features, pi.id, dim)?)?;
                for &j in inst.iter().filter(|&&j| j != i) {
                    let pj = dataset.photo(c, j).ok_or(Error::MissingMatch { query: j })?;
                    sum += dp - cosine_distance(fs, feature(features, pj.id, dim)?)?;
                    n += 1;
                }
            }
        }
        if n > 0 {
            out.insert(c, sum / n as f64);
        }
    }
    Ok(out)
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}
