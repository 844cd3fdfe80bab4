//! Triplet batch construction over the seen categories.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality, SplitDescriptor};
use crate::error::{Error, Result};
use crate::seed::LabRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Category,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: u32,
    pub positive: u32,
    pub negative: u32,
    pub anchor_category: u32,
    pub negative_category: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub mode: BatchMode,
    pub triplets: Vec<Triplet>,
    /// Hard mode only: category and the indices of its triplets.
    pub groups: Vec<(u32, Vec<usize>)>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative])
    }
}

/// The instances each category may contribute to training batches.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pool {
    instances: BTreeMap<u32, Vec<u32>>,
}

impl Pool {
    pub fn new(instances: BTreeMap<u32, Vec<u32>>) -> Pool {
        Pool { instances }
    }

    /// Every instance of the listed categories.
    pub fn from_categories(dataset: &Dataset, categories: &[u32]) -> Pool {
        let instances = categories.iter().map(|&c| (c, dataset.instances(c).to_vec())).collect();
        Pool { instances }
    }

    pub fn unseen(dataset: &Dataset, split: &SplitDescriptor) -> Pool {
        Pool::from_categories(dataset, &split.unseen)
    }

    /// All instances of the split's seen categories.
    pub fn seen(dataset: &Dataset, split: &SplitDescriptor) -> Pool {
        Pool::seen_with_probe(dataset, split, 0).0
    }

    /// Seen categories with the last `probe` instances of each held out.
    /// Returns `(training pool, probe pool)`.
    pub fn seen_with_probe(dataset: &Dataset, split: &SplitDescriptor, probe: usize) -> (Pool, Pool) {
        let mut train = BTreeMap::new();
        let mut held = BTreeMap::new();
        for &c in &split.seen {
            let inst = dataset.instances(c);
            let keep = inst.len().saturating_sub(probe);
            if keep > 0 {
                train.insert(c, inst[..keep].to_vec());
            }
            if keep < inst.len() {
                held.insert(c, inst[keep..].to_vec());
            }
        }
        (Pool { instances: train }, Pool { instances: held })
    }

    pub fn categories(&self) -> Vec<u32> {
        self.instances.keys().copied().collect()
    }

    pub fn instances(&self, category: u32) -> &[u32] {
        self.instances.get(&category).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn contains(&self, category: u32, instance: u32) -> bool {
        self.instances(category).contains(&instance)
    }

    /// Sketch ids of the pool, in dataset order.
    pub fn sketch_ids(&self, dataset: &Dataset) -> Vec<u32> {
        self.items(dataset, Modality::Sketch)
    }

    pub fn photo_ids(&self, dataset: &Dataset) -> Vec<u32> {
        self.items(dataset, Modality::Photo)
    }

    fn items(&self, dataset: &Dataset, modality: Modality) -> Vec<u32> {
        let mut out = Vec::new();
        for (&c, inst) in &self.instances {
            for &i in inst {
                match modality {
                    Modality::Photo => out.extend(dataset.photo(c, i).map(|p| p.id)),
                    Modality::Sketch => out.extend(dataset.sketches(c, i).iter().map(|s| s.id)),
                }
            }
        }
        out
    }
}

fn photo_id(dataset: &Dataset, c: u32, i: u32) -> Result<u32> {
    dataset
        .photo(c, i)
        .map(|p| p.id)
        .ok_or_else(|| Error::InsufficientData(format!("no photo for category {} instance {}", c, i)))
}

/// Category-level triplets: anchors uniform over pool sketches, positive a
/// uniform photo of the anchor's category, negative a uniform photo of a
/// uniformly drawn other category.
pub fn sample_category_triplets_from(
    dataset: &Dataset,
    pool: &Pool,
    batch_size: usize,
    rng: &mut LabRng,
) -> Result<TripletBatch> {
    let cats = pool.categories();
    if cats.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "category triplets need at least 2 seen categories, have {}",
            cats.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let sketches = pool.sketch_ids(dataset);
    let mut triplets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let anchor = dataset.item(sketches[rng.random_range(0..sketches.len())]).expect("pool item");
        let c = anchor.category;
        let inst = pool.instances(c);
        let positive = photo_id(dataset, c, inst[rng.random_range(0..inst.len())])?;
        let mut k = rng.random_range(0..cats.len() - 1);
        let ci = cats.binary_search(&c).expect("anchor category in pool");
        if k >= ci {
            k += 1;
        }
        let nc = cats[k];
        let ninst = pool.instances(nc);
        let negative = photo_id(dataset, nc, ninst[rng.random_range(0..ninst.len())])?;
        triplets.push(Triplet { anchor: anchor.id, positive, negative, anchor_category: c, negative_category: nc });
    }
    Ok(TripletBatch { mode: BatchMode::Category, triplets, groups: Vec::new() })
}

pub fn sample_category_triplets(
    dataset: &Dataset,
    split: &SplitDescriptor,
    batch_size: usize,
    rng: &mut LabRng,
) -> Result<TripletBatch> {
    sample_category_triplets_from(dataset, &Pool::seen(dataset, split), batch_size, rng)
}

/// Hard triplets: `c` distinct categories, `t` triplets each of (sketch of
/// instance i, photo i, photo of another instance of the same category).
pub fn sample_hard_triplets_from(
    dataset: &Dataset,
    pool: &Pool,
    c: usize,
    t: usize,
    rng: &mut LabRng,
) -> Result<TripletBatch> {
    if c < 2 || t == 0 {
        return Err(Error::Config(format!("hard triplets need C >= 2 and T >= 1, got C={} T={}", c, t)));
    }
    let eligible: Vec<u32> = pool.categories().into_iter().filter(|&k| pool.instances(k).len() >= 2).collect();
    if eligible.len() < c {
        return Err(Error::InsufficientData(format!(
            "{} categories with at least 2 instances, need {}",
            eligible.len(),
            c
        )));
    }
    let mut chosen: Vec<u32> = sample(rng, eligible.len(), c).iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    let mut triplets = Vec::with_capacity(c * t);
    let mut groups = Vec::with_capacity(c);
    for cat in chosen {
        let inst = pool.instances(cat);
        let mut idx = Vec::with_capacity(t);
        for _ in 0..t {
            let a = rng.random_range(0..inst.len());
            let mut b = rng.random_range(0..inst.len() - 1);
            if b >= a {
                b += 1;
            }
            let sketches = dataset.sketches(cat, inst[a]);
            if sketches.is_empty() {
                return Err(Error::InsufficientData(format!("no sketch for category {} instance {}", cat, inst[a])));
            }
            let anchor = sketches[rng.random_range(0..sketches.len())].id;
            idx.push(triplets.len());
            triplets.push(Triplet {
                anchor,
                positive: photo_id(dataset, cat, inst[a])?,
                negative: photo_id(dataset, cat, inst[b])?,
                anchor_category: cat,
                negative_category: cat,
            });
        }
        groups.push((cat, idx));
    }
    Ok(TripletBatch { mode: BatchMode::Hard, triplets, groups })
}

pub fn sample_hard_triplets(
    dataset: &Dataset,
    split: &SplitDescriptor,
    c: usize,
    t: usize,
    rng: &mut LabRng,
) -> Result<TripletBatch> {
    sample_hard_triplets_from(dataset, &Pool::seen(dataset, split), c, t, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, split_zero_shot, DatasetSpec};
    use crate::seed;

    fn setup(instances: usize) -> (Dataset, SplitDescriptor) {
        let spec = DatasetSpec {
            num_categories: 5,
            instances_per_category: instances,
            sketches_per_instance: 2,
            image_size: 16,
            seed: 1,
        };
        let d = generate_dataset(&spec).unwrap();
        let s = split_zero_shot(&d.categories(), 2, 9).unwrap();
        (d, s)
    }

    #[test]
    fn category_contract() {
        let (d, s) = setup(3);
        let mut rng = seed::rng(2, &[]);
        let b = sample_category_triplets(&d, &s, 17, &mut rng).unwrap();
        assert_eq!(b.len(), 17);
        for t in &b.triplets {
            assert_ne!(t.anchor_category, t.negative_category);
            assert_eq!(d.item(t.positive).unwrap().category, t.anchor_category);
            assert_eq!(d.item(t.negative).unwrap().category, t.negative_category);
            assert_eq!(d.item(t.anchor).unwrap().modality, Modality::Sketch);
        }
        assert!(b.item_ids().all(|id| s.is_seen(d.item(id).unwrap().category)));
    }

    #[test]
    fn hard_contract_and_boundary() {
        let (d, s) = setup(2);
        let mut rng = seed::rng(3, &[]);
        let b = sample_hard_triplets(&d, &s, 2, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.groups.len(), 2);
        for (cat, idx) in &b.groups {
            assert_eq!(idx.len(), 4);
            for &i in idx {
                let t = b.triplets[i];
                let (a, p, n) = (d.item(t.anchor).unwrap(), d.item(t.positive).unwrap(), d.item(t.negative).unwrap());
                assert!(a.category == *cat && p.category == *cat && n.category == *cat);
                assert_eq!(a.instance, p.instance);
                assert_eq!(n.instance, 1 - p.instance);
            }
        }
        assert!(sample_hard_triplets(&d, &s, 4, 1, &mut rng).is_err());
        assert!(sample_hard_triplets(&d, &s, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn one_seen_category_is_rejected() {
        let (d, _) = setup(2);
        let s = split_zero_shot(&d.categories(), 4, 1).unwrap();
        let mut rng = seed::rng(3, &[]);
        assert!(matches!(sample_category_triplets(&d, &s, 4, &mut rng), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn probe_is_held_out() {
        let (d, s) = setup(4);
        let (train, probe) = Pool::seen_with_probe(&d, &s, 1);
        for c in train.categories() {
            assert_eq!(train.instances(c), &[0, 1, 2]);
            assert_eq!(probe.instances(c), &[3]);
        }
        let mut rng = seed::rng(5, &[]);
        for _ in 0..20 {
            let b = sample_hard_triplets_from(&d, &train, 2, 3, &mut rng).unwrap();
            assert!(b.item_ids().all(|id| d.item(id).unwrap().instance != 3));
        }
    }
}
