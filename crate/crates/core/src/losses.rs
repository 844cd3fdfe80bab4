//! Training objectives, built as graph nodes over feature variables.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::seed;
use crate::tensor::{normalize, Tensor};

/// Fixed logit temperature for the text-embedding classifier.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Triplet margin.
    pub mu: f64,
    /// Patch-shuffle triplet margin.
    pub mu_ps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mu: 0.3,
            mu_ps: 0.3,
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 0.1,
            lambda4: 1.0,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.mu_ps, self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("margins and loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Unit-norm class embeddings `t_j` keyed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    entries: BTreeMap<u32, Tensor>,
    temperature: f64,
}

impl ClassEmbeddingTable {
    pub fn new(entries: BTreeMap<u32, Tensor>, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", temperature)));
        }
        if entries.is_empty() {
            return Err(Error::Config("class embedding table is empty".into()));
        }
        let dim = entries.values().next().map(|t| t.len()).unwrap_or(0);
        for (id, t) in &entries {
            if t.shape() != [dim] {
                return Err(Error::Shape(format!("class {} embedding has shape {:?}", id, t.shape())));
            }
            if (t.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("class {} embedding is not unit norm", id)));
            }
        }
        Ok(ClassEmbeddingTable { entries, temperature })
    }

    /// Deterministic stand-in for text-encoder outputs: the class name seeds
    /// a Gaussian draw which is then normalized.
    pub fn pseudo(classes: &[u32], dim: usize, temperature: f64) -> Result<Self> {
        let entries = classes
            .iter()
            .map(|&c| {
                let name = format!("a photo of a category-{}", c);
                let mut rng = seed::rng(seed::hash_str(&name), &[]);
                let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                Ok((c, Tensor::vector(normalize(&raw)?)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::new(entries, temperature)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn dim(&self) -> usize {
        self.entries.values().next().map(|t| t.len()).unwrap_or(0)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self) -> &BTreeMap<u32, Tensor> {
        &self.entries
    }

    fn position(&self, label: u32) -> Result<usize> {
        self.entries.keys().position(|&k| k == label).ok_or(Error::UnknownLabel(label))
    }
}

/// `d(s, p) - d(s, n)` with cosine distance.
pub fn relative_distance(g: &mut Graph<'_>, anchor: Var, positive: Var, negative: Var) -> Result<Var> {
    let dp = g.cosine_distance(anchor, positive)?;
    let dn = g.cosine_distance(anchor, negative)?;
    g.sub(dp, dn)
}

/// `max(0, margin + delta)` for a precomputed relative distance.
pub fn hinge(g: &mut Graph<'_>, delta: Var, margin: f64) -> Var {
    let shifted = g.add_scalar(delta, margin);
    g.relu(shifted)
}

pub fn triplet_loss(g: &mut Graph<'_>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let delta = relative_distance(g, anchor, positive, negative)?;
    Ok(hinge(g, delta, margin))
}

/// Hinge between a sketch shuffled by one permutation, the photo shuffled by
/// the same permutation, and the photo shuffled by a different one.
pub fn patch_shuffle_loss(
    g: &mut Graph<'_>,
    sketch_g1: Var,
    photo_g1: Var,
    photo_g2: Var,
    margin: f64,
) -> Result<Var> {
    triplet_loss(g, sketch_g1, photo_g1, photo_g2, margin)
}

/// Mean negative log-probability of the true class, where class
/// probabilities are a softmax over cosine similarities divided by the
/// temperature.
pub fn classification_loss<'a>(
    g: &mut Graph<'a>,
    features: &[Var],
    labels: &[u32],
    table: &'a ClassEmbeddingTable,
) -> Result<Var> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Shape(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let targets = labels.iter().map(|&l| table.position(l)).collect::<Result<Vec<_>>>()?;
    let class_vars: Vec<Var> = table.entries.values().map(|t| g.input(t)).collect();
    let inv_t = 1.0 / table.temperature;
    let mut nll = Vec::with_capacity(features.len());
    for (&f, &target) in features.iter().zip(&targets) {
        let sims = class_vars.iter().map(|&t| g.cosine_similarity(f, t)).collect::<Result<Vec<_>>>()?;
        let logits = g.stack(&sims)?;
        let logp = g.log_softmax(logits, inv_t);
        let picked = g.element(logp, target)?;
        nll.push(g.scale(picked, -1.0));
    }
    g.mean_all(&nll)
}

/// Result of the relative-distance divergence regularizer.
#[derive(Debug, Clone, Copy)]
pub struct Divergence {
    pub loss: Var,
    /// Fewer than two groups: the term is a constant zero.
    pub degenerate: bool,
}

/// Average pairwise KL divergence between per-category softmax
/// distributions of relative distances, `1/(C(C-1)) sum_{i != j} KL(D_i || D_j)`.
///
/// Each group holds the relative-distance scalars of one category; all
/// groups must have the same length.
pub fn fdiv_loss(g: &mut Graph<'_>, groups: &[Vec<Var>]) -> Result<Divergence> {
    if groups.len() < 2 {
        log::warn!("relative-distance regularizer needs at least two categories, got {}", groups.len());
        let loss = g.constant(Tensor::scalar(0.0));
        return Ok(Divergence { loss, degenerate: true });
    }
    let t = groups[0].len();
    if t == 0 || groups.iter().any(|gr| gr.len() != t) {
        return Err(Error::Shape("relative-distance groups must have equal, non-zero size".into()));
    }
    let mut probs = Vec::with_capacity(groups.len());
    let mut logs = Vec::with_capacity(groups.len());
    for gr in groups {
        let v = g.stack(gr)?;
        probs.push(g.softmax(v, 1.0));
        logs.push(g.log_softmax(v, 1.0));
    }
    let mut terms = Vec::with_capacity(groups.len() * (groups.len() - 1));
    for i in 0..groups.len() {
        for j in 0..groups.len() {
            if i == j {
                continue;
            }
            let diff = g.sub(logs[i], logs[j])?;
            let weighted = g.mul(probs[i], diff)?;
            terms.push(g.sum(weighted));
        }
    }
    let loss = g.mean_all(&terms)?;
    Ok(Divergence { loss, degenerate: false })
}

/// Feature variables of one triplet batch.
#[derive(Debug, Clone, Default)]
pub struct TripletFeatures {
    pub anchors: Vec<Var>,
    pub positives: Vec<Var>,
    pub negatives: Vec<Var>,
    pub anchor_labels: Vec<u32>,
    pub positive_labels: Vec<u32>,
    pub negative_labels: Vec<u32>,
}

impl TripletFeatures {
    fn check(&self) -> Result<()> {
        let n = self.anchors.len();
        let lens = [
            self.positives.len(),
            self.negatives.len(),
            self.anchor_labels.len(),
            self.positive_labels.len(),
            self.negative_labels.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::Shape("triplet features must be non-empty and aligned".into()));
        }
        Ok(())
    }
}

/// Shuffled (sketch gamma1, photo gamma1, photo gamma2) feature triplets.
#[derive(Debug, Clone, Default)]
pub struct ShuffledFeatures {
    pub sketches: Vec<Var>,
    pub matched: Vec<Var>,
    pub mismatched: Vec<Var>,
}

/// Individual objective terms (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub l_tri: Var,
    pub l_cls_s: Var,
    pub l_cls_p: Var,
    pub l_delta: Var,
    pub l_ps: Var,
    pub total: Var,
    pub delta_degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub l_tri: f64,
    pub l_cls_s: f64,
    pub l_cls_p: f64,
    pub l_delta: f64,
    pub l_ps: f64,
    pub total: f64,
}

impl ObjectiveTerms {
    pub fn values(&self, g: &Graph<'_>) -> TermValues {
        TermValues {
            l_tri: g.scalar(self.l_tri),
            l_cls_s: g.scalar(self.l_cls_s),
            l_cls_p: g.scalar(self.l_cls_p),
            l_delta: g.scalar(self.l_delta),
            l_ps: g.scalar(self.l_ps),
            total: g.scalar(self.total),
        }
    }
}

fn photo_cls<'a>(g: &mut Graph<'a>, f: &TripletFeatures, table: &'a ClassEmbeddingTable) -> Result<Var> {
    let mut feats = f.positives.clone();
    feats.extend_from_slice(&f.negatives);
    let mut labels = f.positive_labels.clone();
    labels.extend_from_slice(&f.negative_labels);
    classification_loss(g, &feats, &labels, table)
}

/// `total = base + sum(weight * term)`, skipping zero weights so a zero
/// weight removes the term from both value and gradient exactly.
fn weighted_total(g: &mut Graph<'_>, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total = base;
    for &(w, t) in terms {
        if w != 0.0 {
            let s = g.scale(t, w);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Category-level objective `L_tri + lambda1 (L_cls^p + L_cls^s)`.
pub fn objective_zs<'a>(
    g: &mut Graph<'a>,
    f: &TripletFeatures,
    table: &'a ClassEmbeddingTable,
    w: &LossWeights,
) -> Result<ObjectiveTerms> {
    f.check()?;
    let tri = (0..f.anchors.len())
        .map(|i| triplet_loss(g, f.anchors[i], f.positives[i], f.negatives[i], w.mu))
        .collect::<Result<Vec<_>>>()?;
    let l_tri = g.mean_all(&tri)?;
    let l_cls_s = classification_loss(g, &f.anchors, &f.anchor_labels, table)?;
    let l_cls_p = photo_cls(g, f, table)?;
    let zero = g.constant(Tensor::scalar(0.0));
    let total = weighted_total(g, l_tri, &[(w.lambda1, l_cls_p), (w.lambda1, l_cls_s)])?;
    Ok(ObjectiveTerms { l_tri, l_cls_s, l_cls_p, l_delta: zero, l_ps: zero, total, delta_degenerate: false })
}

/// Fine-grained objective
/// `L_tri^hard + lambda2 (L_cls^s + L_cls^p) + lambda3 L_delta + lambda4 L_ps`.
///
/// `groups` lists, per category, the indices of its triplets; the relative
/// distances of those triplets feed the divergence term. An empty
/// `shuffled` set contributes a zero patch-shuffle term.
pub fn objective_fg<'a>(
    g: &mut Graph<'a>,
    f: &TripletFeatures,
    groups: &[Vec<usize>],
    shuffled: &ShuffledFeatures,
    table: &'a ClassEmbeddingTable,
    w: &LossWeights,
) -> Result<ObjectiveTerms> {
    f.check()?;
    let deltas = (0..f.anchors.len())
        .map(|i| relative_distance(g, f.anchors[i], f.positives[i], f.negatives[i]))
        .collect::<Result<Vec<_>>>()?;
    let tri: Vec<Var> = deltas.iter().map(|&d| hinge(g, d, w.mu)).collect();
    let l_tri = g.mean_all(&tri)?;
    let l_cls_s = classification_loss(g, &f.anchors, &f.anchor_labels, table)?;
    let l_cls_p = photo_cls(g, f, table)?;

    let mut group_vars = Vec::with_capacity(groups.len());
    for gr in groups {
        let vars = gr
            .iter()
            .map(|&i| deltas.get(i).copied().ok_or_else(|| Error::Shape(format!("group index {} out of range", i))))
            .collect::<Result<Vec<_>>>()?;
        group_vars.push(vars);
    }
    let div = fdiv_loss(g, &group_vars)?;

    let n_ps = shuffled.sketches.len();
    if shuffled.matched.len() != n_ps || shuffled.mismatched.len() != n_ps {
        return Err(Error::Shape("shuffled triplets are not aligned".into()));
    }
    let l_ps = if n_ps == 0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let ps = (0..n_ps)
            .map(|i| patch_shuffle_loss(g, shuffled.sketches[i], shuffled.matched[i], shuffled.mismatched[i], w.mu_ps))
            .collect::<Result<Vec<_>>>()?;
        g.mean_all(&ps)?
    };
    let total = weighted_total(
        g,
        l_tri,
        &[(w.lambda2, l_cls_s), (w.lambda2, l_cls_p), (w.lambda3, div.loss), (w.lambda4, l_ps)],
    )?;
    Ok(ObjectiveTerms { l_tri, l_cls_s, l_cls_p, l_delta: div.loss, l_ps, total, delta_degenerate: div.degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Unit vectors in the plane at angle `a` (radians).
    fn unit(g: &mut Graph<'_>, a: f64) -> Var {
        g.variable(Tensor::vector(vec![libm::cos(a), libm::sin(a)]).unwrap())
    }

    /// Angle whose cosine distance from angle 0 equals `d`.
    fn angle_for(d: f64) -> f64 {
        libm::acos(1.0 - d)
    }

    #[test]
    fn relative_distance_examples() {
        let mut g = Graph::new();
        let s = unit(&mut g, 0.0);
        let p = unit(&mut g, angle_for(0.2));
        let n = unit(&mut g, -angle_for(0.6));
        let d = relative_distance(&mut g, s, p, n).unwrap();
        assert!((g.scalar(d) + 0.4).abs() < 1e-12);
        let r = relative_distance(&mut g, s, n, p).unwrap();
        assert_eq!(g.scalar(r), -g.scalar(d));
        let same = relative_distance(&mut g, s, p, p).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn triplet_examples() {
        let mut g = Graph::new();
        let s = unit(&mut g, 0.0);
        let p = unit(&mut g, angle_for(0.2));
        let n = unit(&mut g, angle_for(0.6));
        let l = triplet_loss(&mut g, s, p, n, 0.3).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = triplet_loss(&mut g, s, p, p, 0.3).unwrap();
        assert_eq!(g.scalar(l), 0.3);
        let p = unit(&mut g, angle_for(0.5));
        let n = unit(&mut g, angle_for(0.2));
        let l = triplet_loss(&mut g, s, p, n, 0.3).unwrap();
        assert!((g.scalar(l) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn patch_shuffle_examples() {
        let mut g = Graph::new();
        let s = unit(&mut g, 0.0);
        let m = unit(&mut g, angle_for(0.1));
        let x = unit(&mut g, angle_for(0.9));
        let l = patch_shuffle_loss(&mut g, s, m, x, 0.3).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = patch_shuffle_loss(&mut g, s, m, m, 0.3).unwrap();
        assert_eq!(g.scalar(l), 0.3);
    }

    fn table(vectors: &[(u32, Vec<f64>)], t: f64) -> ClassEmbeddingTable {
        let entries = vectors.iter().map(|(k, v)| (*k, Tensor::vector(v.clone()).unwrap())).collect();
        ClassEmbeddingTable::new(entries, t).unwrap()
    }

    #[test]
    fn classification_examples() {
        let tb = table(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])], 1.0);
        let mut g = Graph::new();
        let f = unit(&mut g, 0.0);
        let l = classification_loss(&mut g, &[f], &[0], &tb).unwrap();
        let expected = -libm::log(libm::exp(1.0) / (libm::exp(1.0) + 1.0));
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        assert!((g.scalar(l) - 0.31326).abs() < 1e-5);
        assert_eq!(classification_loss(&mut g, &[f], &[7], &tb).unwrap_err(), Error::UnknownLabel(7));

        let same = table(&[(0, vec![0.6, 0.8]), (1, vec![0.6, 0.8]), (2, vec![0.6, 0.8])], 0.07);
        let mut g = Graph::new();
        let fs = [unit(&mut g, 0.3), unit(&mut g, 2.0)];
        let l = classification_loss(&mut g, &fs, &[0, 2], &same).unwrap();
        assert!((g.scalar(l) - libm::log(3.0)).abs() < 1e-12);

        let sharp = table(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])], 1e-3);
        let mut g = Graph::new();
        let f = unit(&mut g, 0.2);
        let l = classification_loss(&mut g, &[f], &[0], &sharp).unwrap();
        assert!(g.scalar(l) < 1e-2);
    }

    #[test]
    fn pseudo_table_is_deterministic_unit_norm() {
        let a = ClassEmbeddingTable::pseudo(&[0, 3, 5], 16, 0.07).unwrap();
        let b = ClassEmbeddingTable::pseudo(&[5, 3, 0], 16, 0.07).unwrap();
        assert_eq!(a, b);
        for t in a.entries().values() {
            assert!((t.norm() - 1.0).abs() < 1e-9);
        }
        assert_ne!(a.entries()[&0], a.entries()[&3]);
        assert!(ClassEmbeddingTable::pseudo(&[0], 4, 0.0).is_err());
    }

    fn scalars(g: &mut Graph<'_>, v: &[f64]) -> Vec<Var> {
        v.iter().map(|&x| g.variable(Tensor::scalar(x))).collect()
    }

    /// Relative distances whose softmax equals the given distribution.
    fn logits_of(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| libm::log(*v)).collect()
    }

    #[test]
    fn fdiv_examples() {
        let mut g = Graph::new();
        let a = scalars(&mut g, &logits_of(&[0.5, 0.5]));
        let b = scalars(&mut g, &logits_of(&[0.9, 0.1]));
        let d = fdiv_loss(&mut g, &[a.clone(), b.clone()]).unwrap();
        // KL([.5,.5] || [.9,.1]) = 0.5 ln(5/9) + 0.5 ln 5; KL([.9,.1] || [.5,.5]) = 0.9 ln 1.8 + 0.1 ln 0.2
        let kl12 = 0.5 * libm::log(0.5 / 0.9) + 0.5 * libm::log(0.5 / 0.1);
        let kl21 = 0.9 * libm::log(0.9 / 0.5) + 0.1 * libm::log(0.1 / 0.5);
        assert!((g.scalar(d.loss) - (kl12 + kl21) / 2.0).abs() < 1e-12);
        assert!((g.scalar(d.loss) - 0.43949).abs() < 1e-4);
        assert!(!d.degenerate);

        let same = fdiv_loss(&mut g, &[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(g.scalar(same.loss), 0.0);

        let shifted: Vec<Var> = b.iter().map(|&v| g.add_scalar(v, 3.7)).collect();
        let d2 = fdiv_loss(&mut g, &[a.clone(), shifted]).unwrap();
        assert!((g.scalar(d2.loss) - g.scalar(d.loss)).abs() < 1e-12);

        let single = fdiv_loss(&mut g, &[a.clone()]).unwrap();
        assert!(single.degenerate);
        assert_eq!(g.scalar(single.loss), 0.0);

        let short = scalars(&mut g, &[0.1]);
        assert!(fdiv_loss(&mut g, &[a, short]).is_err());
    }

    #[test]
    fn objective_zs_weighting() {
        let tb = table(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])], 0.5);
        let mut g = Graph::new();
        let f = TripletFeatures {
            anchors: vec![unit(&mut g, 0.1), unit(&mut g, 1.4)],
            positives: vec![unit(&mut g, 0.5), unit(&mut g, 1.2)],
            negatives: vec![unit(&mut g, 1.3), unit(&mut g, 0.2)],
            anchor_labels: vec![0, 1],
            positive_labels: vec![0, 1],
            negative_labels: vec![1, 0],
        };
        let w = LossWeights { lambda1: 0.0, ..LossWeights::default() };
        let t = objective_zs(&mut g, &f, &tb, &w).unwrap().values(&g);
        assert_eq!(t.total, t.l_tri);

        let w = LossWeights::default();
        let t = objective_zs(&mut g, &f, &tb, &w).unwrap().values(&g);
        assert!((t.total - (t.l_tri + 0.5 * (t.l_cls_s + t.l_cls_p))).abs() < 1e-12);
        assert_eq!(t.l_delta, 0.0);
        assert_eq!(t.l_ps, 0.0);
    }
}
