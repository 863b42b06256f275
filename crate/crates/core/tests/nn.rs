mod common;

use common::*;
use cxgrad::autodiff::{Array, Graph, Tensor};
use cxgrad::nn::*;
use cxgrad::Error;
use proptest::prelude::*;
use rand::Rng;

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..n * size * size).map(|_| r.random::<f64>()).collect();
    Tensor::constant(Array::new(vec![n, 1, size, size], data).unwrap())
}

/// Backbone whose conv weights are scaled so every pre-BN variance is far
/// above ε.
fn conditioned_theta(seed: u64) -> Theta<Array> {
    let mut t = Theta::init(&tiny_model(), &mut rng(seed));
    for b in &mut t.backbone.blocks {
        b.weight = b.weight.map(|w| w * 1e3);
    }
    t
}

#[test]
fn backbone_output_ignores_positive_weight_scale() {
    let x = images(6, 16, 1);
    for seed in 0..5 {
        let theta = conditioned_theta(seed);
        let base = backbone_forward(&theta.constants().backbone, &x, false).unwrap().features;
        for a in [0.1, 0.5, 2.0, 10.0] {
            for layer in 0..NUM_LAYERS {
                let mut t = theta.clone();
                t.backbone.blocks[layer].weight = t.backbone.blocks[layer].weight.map(|w| w * a);
                let out = backbone_forward(&t.constants().backbone, &x, false).unwrap().features;
                let d = max_abs_diff(base.data(), out.data());
                assert!(d < 1e-7, "seed {seed} a {a} layer {layer}: {d:e}");
            }
        }
    }
}

#[test]
fn zero_weights_give_beta_constants() {
    let mut theta = Theta::init(&tiny_model(), &mut rng(0));
    for b in &mut theta.backbone.blocks {
        b.weight = Array::zeros(b.weight.shape());
        b.bn_beta = Array::from_vec(vec![0.3, -0.2, 0.7, 0.0]);
    }
    let out = backbone_forward(&theta.constants().backbone, &images(4, 16, 2), true).unwrap();
    for act in &out.activations {
        let [n, c, h, w] = [act.shape()[0], act.shape()[1], act.shape()[2], act.shape()[3]];
        for i in 0..n * c * h * w {
            let ch = (i / (h * w)) % c;
            let want = [0.3, 0.0, 0.7, 0.0][ch];
            assert_eq!(act.data()[i], want);
        }
    }
}

#[test]
fn spatial_dims_below_sixteen_are_rejected() {
    let theta = Theta::init(&tiny_model(), &mut rng(0));
    let err = backbone_forward(&theta.constants().backbone, &images(2, 12, 0), false)
        .err()
        .unwrap();
    assert!(matches!(err, Error::SpatialDims { height: 12, width: 12 }));
}

#[test]
fn identity_init_gives_unit_scaling() {
    let cfg = tiny_model();
    let sub = SubNetwork::init(&cfg, &mut rng(3)).map(|a| Tensor::constant(a.clone()));
    let g = Graph::new();
    let ctx = ContextParams::reset(&g, cfg.context_dim);
    let gamma = generate_scaling_factors(&sub, &ctx).unwrap().values();
    assert_eq!(gamma.len(), NUM_LAYERS);
    for v in gamma {
        assert!((v - 1.0).abs() < 1e-15);
    }
}

fn random_subnet(seed: u64) -> SubNetwork<Array> {
    let cfg = tiny_model();
    let mut sub = SubNetwork::init(&cfg, &mut rng(seed));
    let mut r = rng(seed + 1);
    let data = (0..sub.w2.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    sub.w2 = Array::new(sub.w2.shape().to_vec(), data).unwrap();
    sub
}

fn gammas_at(sub: &SubNetwork<Array>, nu: &[f64]) -> Vec<f64> {
    let g = Graph::new();
    let ctx = ContextParams {
        nu: g.leaf(Array::from_vec(nu.to_vec())),
    };
    generate_scaling_factors(&sub.map(|a| Tensor::constant(a.clone())), &ctx)
        .unwrap()
        .values()
}

#[test]
fn scaling_factor_jacobian_matches_finite_differences() {
    let h = 1e-6;
    for seed in 0..10 {
        let sub = random_subnet(seed);
        let mut r = rng(100 + seed);
        let nu: Vec<f64> = (0..tiny_model().context_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        for l in 0..NUM_LAYERS {
            let g = Graph::new();
            let ctx = ContextParams {
                nu: g.leaf(Array::from_vec(nu.clone())),
            };
            let f = generate_scaling_factors(&sub.map(|a| Tensor::constant(a.clone())), &ctx).unwrap();
            let d = g.grad(&f.layer(l).unwrap().sum().unwrap(), &[&ctx.nu], false).unwrap()[0]
                .clone()
                .unwrap();
            let fd: Vec<f64> = (0..nu.len())
                .map(|i| {
                    let (mut p, mut m) = (nu.clone(), nu.clone());
                    p[i] += h;
                    m[i] -= h;
                    (gammas_at(&sub, &p)[l] - gammas_at(&sub, &m)[l]) / (2.0 * h)
                })
                .collect();
            let num: f64 = d.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den = d.value().norm().max(1e-12);
            assert!(num / den < 1e-4, "seed {seed} layer {l}: {:e}", num / den);
        }
    }
}

#[test]
fn perturbing_context_changes_gamma() {
    let sub = random_subnet(5);
    let dim = tiny_model().context_dim;
    let a = gammas_at(&sub, &vec![0.0; dim]);
    let b = gammas_at(&sub, &vec![0.5; dim]);
    assert!(max_abs_diff(&a, &b) > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_factors_are_positive(nu in prop::collection::vec(-50.0f64..50.0, 8), seed in 0u64..1000) {
        let sub = random_subnet(seed);
        for v in gammas_at(&sub, &nu) {
            prop_assert!(v > 0.0);
        }
    }
}

#[test]
fn layer_norm_is_the_frobenius_norm_of_the_conv_weight() {
    let mut theta = Theta::init(&tiny_model(), &mut rng(0));
    theta.backbone.blocks[0].weight = Array::zeros(theta.backbone.blocks[0].weight.shape());
    assert_eq!(layer_param_norm(&theta.backbone, 1).unwrap(), 0.0);

    let mut single = vec![0.0; 9];
    single[4] = 3.0;
    theta.backbone.blocks[1].weight = Array::new(vec![1, 1, 3, 3], single).unwrap();
    assert_eq!(layer_param_norm(&theta.backbone, 2).unwrap(), 3.0);

    let mut r = rng(9);
    let data: Vec<f64> = (0..36).map(|_| r.random_range(-2.0..2.0)).collect();
    let oracle = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    theta.backbone.blocks[2].weight = Array::new(vec![2, 2, 3, 3], data).unwrap();
    theta.backbone.blocks[2].bn_gamma = Array::full(&[4], 100.0);
    assert!((layer_param_norm(&theta.backbone, 3).unwrap() - oracle).abs() < 1e-12);

    for bad in [0, 5] {
        assert!(matches!(
            layer_param_norm(&theta.backbone, bad),
            Err(Error::LayerOutOfRange { layers: 4, .. })
        ));
    }
}
