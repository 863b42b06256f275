//! Scale invariance of batch normalization: positive rescaling of the
//! weights feeding a BN layer leaves its output unchanged and divides the
//! weight gradient by the same factor.

use cxgrad::autodiff::functional::batchnorm;
use cxgrad::autodiff::{Array, Graph, Tensor};
use proptest::prelude::*;

fn array(shape: &[usize], data: Vec<f64>) -> Array {
    Array::new(shape.to_vec(), data).unwrap()
}

/// `BN(x · (a·v)ᵀ)` for `x: [batch, d]`, `v: [features, d]`.
fn bn_of_scaled(x: &Array, v: &Array, a: f64, eps: f64) -> Vec<f64> {
    let f = v.shape()[0];
    let z = Tensor::constant(x.clone())
        .matmul(&Tensor::constant(v.map(|w| a * w)).transpose().unwrap())
        .unwrap();
    let gamma = Tensor::constant(Array::ones(&[f]));
    let beta = Tensor::constant(Array::zeros(&[f]));
    batchnorm(&z, &gamma, &beta, eps).unwrap().data().to_vec()
}

fn weight_grad_norm(x: &Array, v: &Array, a: f64, w: &Array, eps: f64) -> f64 {
    let f = v.shape()[0];
    let g = Graph::new();
    let vs = g.leaf(v.map(|e| a * e));
    let z = Tensor::constant(x.clone()).matmul(&vs.transpose().unwrap()).unwrap();
    let gamma = Tensor::constant(Array::full(&[f], 1.3));
    let beta = Tensor::constant(Array::full(&[f], -0.2));
    let y = batchnorm(&z, &gamma, &beta, eps).unwrap();
    // a non-linear readout so the gradient is not trivially zero
    let loss = y.mul(&Tensor::constant(w.clone())).unwrap().softplus().unwrap().sum().unwrap();
    g.grad(&loss, &[&vs], false).unwrap()[0].as_ref().unwrap().value().norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_invariant_to_positive_weight_scale(
        xs in prop::collection::vec(-3.0f64..3.0, 24),
        vs in prop::collection::vec(-1.0f64..1.0, 12),
        a in 0.05f64..20.0,
    ) {
        let x = array(&[6, 4], xs);
        let v = array(&[3, 4], vs);
        prop_assume!(v.norm() > 0.1);
        let base = bn_of_scaled(&x, &v, 1.0, 0.0);
        prop_assume!(base.iter().all(|b| b.is_finite()));
        let scaled = bn_of_scaled(&x, &v, a, 0.0);
        for (p, q) in base.iter().zip(&scaled) {
            prop_assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }
}

fn lcg(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        })
        .collect()
}

#[test]
fn epsilon_deviation_stays_within_its_bound() {
    // With ε > 0 the identity is approximate:
    // |BN_a − BN_1| ≤ |x̂| · ε·|1/a² − 1| / (2·var)
    let eps = 1e-5;
    for seed in 0..20 {
        let x = array(&[8, 5], lcg(40, seed, 1.0));
        let v = array(&[3, 5], lcg(15, seed + 100, 1.0));
        let z = Tensor::constant(x.clone())
            .matmul(&Tensor::constant(v.clone()).transpose().unwrap())
            .unwrap();
        let var = cxgrad::autodiff::functional::feature_variance(&z).unwrap();
        let base = bn_of_scaled(&x, &v, 1.0, eps);
        for a in [0.1, 0.5, 2.0, 10.0] {
            let scaled = bn_of_scaled(&x, &v, a, eps);
            for (i, (p, q)) in base.iter().zip(&scaled).enumerate() {
                let var_f = var.data()[i % 3];
                let bound = p.abs() * eps * (1.0 / (a * a) - 1.0).abs() / (2.0 * var_f) * 1.0001 + 1e-15;
                assert!((p - q).abs() <= bound, "a={a}: |{p} - {q}| > {bound:e}");
            }
        }
    }
}

#[test]
fn weight_gradient_scales_reciprocally() {
    let eps = 1e-5;
    for seed in 0..20 {
        // well-conditioned pre-activations: variance ≫ ε/a²
        let x = array(&[8, 5], lcg(40, seed, 1000.0));
        let v = array(&[3, 5], lcg(15, seed + 50, 1.0));
        let w = array(&[8, 3], lcg(24, seed + 99, 1.0));
        let base = weight_grad_norm(&x, &v, 1.0, &w, eps);
        for a in [0.1, 0.5, 2.0, 10.0] {
            let scaled = weight_grad_norm(&x, &v, a, &w, eps);
            let rel = (scaled * a / base - 1.0).abs();
            assert!(rel < 1e-6, "seed {seed}, a={a}: ratio off by {rel:e}");
        }
    }
}
