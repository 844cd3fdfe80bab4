use zslab_core::encoder::{Branch, Encoder, EncoderConfig, EncoderMode};
use zslab_core::gradcheck::compare_flat;
use zslab_core::graph::Graph;
use zslab_core::Tensor;

fn tiny(mode: EncoderMode) -> Encoder {
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_dim: 12,
        feature_dim: 5,
        prompt_count: 2,
        mode,
        ln_eps: 1e-5,
    };
    Encoder::build(cfg, 21).unwrap()
}

fn image() -> Tensor {
    Tensor::new(vec![8, 8], (0..64).map(|i| ((i * 37) % 11) as f64 / 10.0).collect()).unwrap()
}

/// Scalar probe `w . f(x)` so every feature coordinate contributes.
fn probe(enc: &Encoder, img: &Tensor, branch: Branch) -> f64 {
    let f = enc.encode(img, branch).unwrap();
    f.data().iter().enumerate().map(|(i, v)| v * (1.0 + 0.3 * i as f64)).sum()
}

#[test]
fn trainable_gradients_match_finite_differences() {
    for (mode, branch) in [(EncoderMode::Shared, Branch::Sketch), (EncoderMode::DualBranch, Branch::Photo)] {
        let mut enc = tiny(mode);
        let img = image();
        let analytic = {
            let mut g = Graph::new();
            let f = enc.encode_in(&mut g, &img, branch).unwrap();
            let w = g.constant(Tensor::vector((0..5).map(|i| 1.0 + 0.3 * i as f64).collect()).unwrap());
            let prod = g.mul(f, w).unwrap();
            let s = g.sum(prod);
            let grads = g.backward(s).unwrap();
            let mut per: Vec<Vec<f64>> = enc.store().iter().map(|p| vec![0.0; p.value().len()]).collect();
            for (id, gr) in grads.param_grads() {
                per[id.index()].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
            per
        };
        for id in enc.trainable_parameters() {
            let point = enc.store().get(id).value().data().to_vec();
            let a = analytic[id.index()].clone();
            let report = compare_flat(
                |x| {
                    enc.store_mut().set_value(id, x)?;
                    Ok(probe(&enc, &img, branch))
                },
                &point,
                &a,
                1e-6,
            )
            .unwrap();
            enc.store_mut().set_value(id, &point).unwrap();
            let name = enc.store().get(id).name().to_string();
            let touched = a.iter().any(|v| *v != 0.0);
            if touched {
                assert!(report.rel_error < 1e-4, "{} rel error {}", name, report.rel_error);
            } else {
                assert!(report.max_abs_error < 1e-8, "{} has numeric gradient but no analytic one", name);
            }
        }
    }
}

#[test]
fn perturbing_one_prompt_coordinate_moves_the_feature() {
    let mut enc = tiny(EncoderMode::Shared);
    let img = image();
    let before = enc.encode(&img, Branch::Sketch).unwrap();
    let id = enc.prompt_param(Branch::Sketch);
    let mut v = enc.store().get(id).value().data().to_vec();
    v[3] += 1e-3;
    enc.store_mut().set_value(id, &v).unwrap();
    let after = enc.encode(&img, Branch::Sketch).unwrap();
    let moved: f64 = before.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(moved > 1e-9, "feature unchanged");
    assert!((after.norm() - 1.0).abs() < 1e-12);
}
