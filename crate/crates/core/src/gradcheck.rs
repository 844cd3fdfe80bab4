//! Central finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    classification_loss, fdiv_loss, objective_fg, patch_shuffle_loss, triplet_loss, ClassEmbeddingTable, LossWeights,
    ShuffledFeatures, TripletFeatures,
};
use crate::seed::{self, LabRng};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|a - n| / max(|a|, |n|, 1e-12)` over the whole gradient vector
    /// (Euclidean norms).
    pub rel_error: f64,
    /// Largest coordinate-wise `|a - n|`.
    pub max_abs_error: f64,
    /// Flat coordinate of `max_abs_error`.
    pub worst_coordinate: usize,
    pub coordinates: usize,
    /// Distance of the nearest hinge pre-activation from its kink.
    pub kink_distance: f64,
    /// Set when a hinge sits within `10 h` of its kink; no comparison is made.
    pub skipped: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.skipped && self.rel_error < tol
    }
}

/// Norm-wise relative error of two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| libm::sqrt(v.map(|x| x * x).sum::<f64>());
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied())).max(1e-12);
    diff / scale
}

fn check_h(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(alloc::format!("finite-difference step {} outside [1e-7, 1e-3]", h)));
    }
    Ok(())
}

/// Compare `analytic` against central differences of `eval` around `point`.
pub fn compare_flat<F>(mut eval: F, point: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_h(h)?;
    if point.len() != analytic.len() {
        return Err(Error::shape(&[point.len()], &[analytic.len()]));
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = eval(&x)?;
        x[i] = orig - h;
        let down = eval(&x)?;
        x[i] = orig;
        let n = (up - down) / (2.0 * h);
        let e = (analytic[i] - n).abs();
        if e > worst.0 {
            worst = (e, i);
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        rel_error: relative_error(analytic, &numeric),
        max_abs_error: worst.0,
        worst_coordinate: worst.1,
        coordinates: x.len(),
        kink_distance: f64::INFINITY,
        skipped: false,
    })
}

/// Check the gradient of a scalar graph with respect to every input tensor.
///
/// `build` receives the inputs as gradient-carrying leaves and returns the
/// scalar loss. Points where a hinge is within `10 h` of its kink are
/// reported as skipped.
pub fn finite_diff_check<'a, F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    check_h(h)?;
    let run = |values: &[Tensor]| -> Result<(Graph<'a>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, loss, vars))
    };
    let (g, loss, vars) = run(inputs)?;
    let kink = g.min_kink_distance();
    if kink <= 10.0 * h {
        return Ok(GradCheckReport {
            rel_error: 0.0,
            max_abs_error: 0.0,
            worst_coordinate: 0,
            coordinates: 0,
            kink_distance: kink,
            skipped: true,
        });
    }
    let grads = g.backward(loss)?;
    let mut analytic = Vec::new();
    let mut point = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(core::iter::repeat_n(0.0, t.len())),
        }
        point.extend_from_slice(t.data());
    }
    drop(g);
    let eval = |flat: &[f64]| -> Result<f64> {
        let mut offset = 0;
        let mut values = Vec::with_capacity(inputs.len());
        for t in inputs {
            let chunk = flat[offset..offset + t.len()].to_vec();
            offset += t.len();
            values.push(Tensor::new(t.shape().to_vec(), chunk)?);
        }
        let (g, loss, _) = run(&values)?;
        Ok(g.scalar(loss))
    };
    let mut report = compare_flat(eval, &point, &analytic, h)?;
    report.kink_distance = kink;
    Ok(report)
}

/// Losses covered by [`run_named`], in report order.
pub const SUITE: [&str; 6] = ["triplet", "hard_triplet", "classification", "fdiv", "patch_shuffle", "objective_fg"];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub points: usize,
    /// Worst norm-wise relative error over the points.
    pub max_rel_error: f64,
    /// Points redrawn because a hinge sat at its kink.
    pub redraws: usize,
    pub passed: bool,
}

fn draw(rng: &mut LabRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite draws")
}

const DIM: usize = 5;

fn fg_inputs(rng: &mut LabRng) -> Vec<Tensor> {
    // anchors, positives, negatives for 2 categories x 2 triplets, then
    // 4 shuffled triplets
    (0..24).map(|_| draw(rng, &[DIM])).collect()
}

fn fg_features(v: &[Var]) -> (TripletFeatures, ShuffledFeatures) {
    let labels = alloc::vec![0, 0, 1, 1];
    let f = TripletFeatures {
        anchors: v[0..4].to_vec(),
        positives: v[4..8].to_vec(),
        negatives: v[8..12].to_vec(),
        anchor_labels: labels.clone(),
        positive_labels: labels.clone(),
        negative_labels: labels,
    };
    let s = ShuffledFeatures { sketches: v[12..16].to_vec(), matched: v[16..20].to_vec(), mismatched: v[20..24].to_vec() };
    (f, s)
}

/// Check one named loss at `points` random points off its kinks. Each
/// point is a fresh draw of standard-normal inputs.
pub fn run_named(name: &str, points: usize, rng_seed: u64, h: f64, tol: f64) -> Result<SuiteRow> {
    let mut rng = seed::rng(rng_seed, &[seed::hash_str(name)]);
    let table = ClassEmbeddingTable::pseudo(&[0, 1, 2], DIM, 0.07)?;
    let w = LossWeights::default();
    let hard = LossWeights { lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, ..LossWeights::default() };
    let groups = alloc::vec![alloc::vec![0, 1], alloc::vec![2, 3]];
    let mut worst = 0.0f64;
    let mut redraws = 0;
    let mut done = 0;
    while done < points {
        if redraws > 100 * points.max(1) {
            return Err(Error::InsufficientData(alloc::format!("{}: could not find points away from kinks", name)));
        }
        let report = match name {
            "triplet" => {
                let x: Vec<Tensor> = (0..3).map(|_| draw(&mut rng, &[DIM])).collect();
                finite_diff_check(|g, v| triplet_loss(g, v[0], v[1], v[2], w.mu), &x, h)?
            }
            "patch_shuffle" => {
                let x: Vec<Tensor> = (0..3).map(|_| draw(&mut rng, &[DIM])).collect();
                finite_diff_check(|g, v| patch_shuffle_loss(g, v[0], v[1], v[2], w.mu_ps), &x, h)?
            }
            "classification" => {
                let x: Vec<Tensor> = (0..4).map(|_| draw(&mut rng, &[DIM])).collect();
                finite_diff_check(|g, v| classification_loss(g, v, &[0, 2, 1, 2], &table), &x, h)?
            }
            "fdiv" => {
                let x: Vec<Tensor> = (0..3).map(|_| draw(&mut rng, &[4])).collect();
                finite_diff_check(
                    |g, v| {
                        let groups = v
                            .iter()
                            .map(|&gv| (0..4).map(|k| g.element(gv, k)).collect::<Result<Vec<_>>>())
                            .collect::<Result<Vec<_>>>()?;
                        Ok(fdiv_loss(g, &groups)?.loss)
                    },
                    &x,
                    h,
                )?
            }
            "hard_triplet" | "objective_fg" => {
                let x = fg_inputs(&mut rng);
                let weights = if name == "hard_triplet" { &hard } else { &w };
                finite_diff_check(
                    |g, v| {
                        let (f, s) = fg_features(v);
                        Ok(objective_fg(g, &f, &groups, &s, &table, weights)?.total)
                    },
                    &x,
                    h,
                )?
            }
            other => return Err(Error::Usage(alloc::format!("unknown loss `{}`", other))),
        };
        if report.skipped {
            redraws += 1;
            continue;
        }
        worst = worst.max(report.rel_error);
        done += 1;
    }
    Ok(SuiteRow { name: name.into(), points, max_rel_error: worst, redraws, passed: worst < tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(alloc::vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.rel_error < 1e-8, "{:?}", r);
        assert!(!r.skipped);
    }

    #[test]
    fn hinge_at_kink_is_skipped() {
        let x = Tensor::vector(alloc::vec![0.0, 1.0]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.skipped);
        assert_eq!(r.kink_distance, 0.0);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn suite_entries_run() {
        for name in SUITE {
            let row = run_named(name, 3, 1, 1e-5, 1e-4).unwrap();
            assert!(row.passed, "{:?}", row);
        }
        assert!(run_named("nope", 1, 1, 1e-5, 1e-4).is_err());
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::vector(alloc::vec![1.0]).unwrap();
        assert!(finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], 0.1).is_err());
    }
}
