//! Frequency and symmetry checks over many seeded draws.

use rand_distr::{Distribution, StandardNormal};
use zslab_core::augment::make_permutation_with;
use zslab_core::data::{generate_dataset, split_zero_shot, DatasetSpec};
use zslab_core::metrics::{acc_at_q, evaluate_zs, rank_gallery, EvalOptions, Features};
use zslab_core::sampler::{sample_category_triplets, Pool};
use zslab_core::seed;
use zslab_core::tensor::normalize;

fn within_three_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sigma
}

fn unit(rng: &mut seed::LabRng, dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&raw).unwrap()
}

#[test]
fn anchor_categories_are_uniform() {
    let d = generate_dataset(&DatasetSpec::default()).unwrap();
    let split = split_zero_shot(&d.categories(), 2, 0).unwrap();
    let mut rng = seed::rng(11, &[]);
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0;
    for _ in 0..100 {
        let b = sample_category_triplets(&d, &split, 100, &mut rng).unwrap();
        for t in &b.triplets {
            *counts.entry(t.anchor_category).or_insert(0usize) += 1;
            total += 1;
        }
    }
    assert_eq!(total, 10_000);
    assert_eq!(counts.len(), split.seen.len());
    let p = 1.0 / split.seen.len() as f64;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - total as f64 * p).powi(2) / (total as f64 * p)).sum();
    // 5 degrees of freedom, p = 0.001
    assert!(chi2 < 20.52, "chi-square {}", chi2);
    for (&c, &n) in &counts {
        assert!(within_three_sigma(n, total, p), "category {} drawn {} times", c, n);
    }
}

#[test]
fn permutations_are_uniform_over_s4() {
    let mut rng = seed::rng(5, &[]);
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..10_000 {
        *counts.entry(make_permutation_with(2, &mut rng).order().to_vec()).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 24);
    for n in counts.values() {
        assert!(within_three_sigma(*n, 10_000, 1.0 / 24.0), "{}", n);
    }
}

#[test]
fn random_gallery_of_two_gives_even_odds() {
    let mut rng = seed::rng(17, &[]);
    let trials = 1000;
    let mut ranks = Vec::with_capacity(trials);
    for _ in 0..trials {
        let q = unit(&mut rng, 8);
        let a = unit(&mut rng, 8);
        let b = unit(&mut rng, 8);
        let ranked = rank_gallery(0, &q, &[(1, a.as_slice()), (2, b.as_slice())]).unwrap();
        ranks.push(ranked.rank_of(1).unwrap());
    }
    let acc = acc_at_q(&ranks, 1);
    let sigma = (0.25 / trials as f64).sqrt();
    assert!((acc - 0.5).abs() <= 3.0 * sigma, "Acc@1 {}", acc);
}

#[test]
fn random_features_give_chance_map_on_two_categories() {
    let d = generate_dataset(&DatasetSpec::default()).unwrap();
    let mut total = 0.0;
    for s in 0..30u64 {
        let split = split_zero_shot(&d.categories(), 2, s).unwrap();
        let pool = Pool::unseen(&d, &split);
        let mut rng = seed::rng(s, &[0x5241_4e44]);
        let mut features = Features::new();
        for id in pool.sketch_ids(&d).into_iter().chain(pool.photo_ids(&d)) {
            features.insert(id, unit(&mut rng, 16));
        }
        total += evaluate_zs(&d, &pool, &features, &EvalOptions::default()).unwrap().map_all.unwrap();
    }
    let mean = total / 30.0;
    // E[AP] of a uniformly random ranking with r relevant among n:
    // (H_n + (r - 1) / (n - 1) * (n - H_n)) / n, about 0.549 for 16 of 32.
    let (n, r) = (32.0, 16.0);
    let h: f64 = (1..=32).map(|k| 1.0 / k as f64).sum();
    let expected = (h + (r - 1.0) / (n - 1.0) * (n - h)) / n;
    assert!((mean - expected).abs() <= 0.05, "mAP@all {} vs chance {}", mean, expected);
}
