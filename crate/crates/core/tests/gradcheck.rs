//! Finite-difference checks of every primitive, first and second order.

use cxgrad::autodiff::functional::{batchnorm, feature_variance, l2_norm, linear, scale_by, softmax_cross_entropy};
use cxgrad::autodiff::{Array, Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
const SEEDS: u64 = 100;

type Fwd = dyn Fn(&[Tensor]) -> Result<Tensor>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn eval(f: &Fwd, xs: &[Array]) -> f64 {
    let ts: Vec<Tensor> = xs.iter().cloned().map(Tensor::constant).collect();
    f(&ts).unwrap().item()
}

fn analytic_grads(f: &Fwd, xs: &[Array], create: bool) -> (Graph, Vec<Tensor>, Vec<Tensor>) {
    let g = Graph::new();
    let leaves: Vec<Tensor> = xs.iter().cloned().map(|a| g.leaf(a)).collect();
    let loss = f(&leaves).unwrap();
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let grads = g
        .grad(&loss, &refs, create)
        .unwrap()
        .into_iter()
        .zip(xs)
        .map(|(o, x)| o.unwrap_or_else(|| Tensor::constant(Array::zeros(x.shape()))))
        .collect();
    (g, leaves, grads)
}

fn flat_grads(f: &Fwd, xs: &[Array]) -> Vec<f64> {
    let (_, _, grads) = analytic_grads(f, xs, false);
    grads.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn fd_grads(f: &Fwd, xs: &[Array]) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let mut plus = xs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = xs.to_vec();
            minus[k].data_mut()[i] -= H;
            out.push((eval(f, &plus) - eval(f, &minus)) / (2.0 * H));
        }
    }
    out
}

/// Hessian-vector product by backward-of-backward vs central differences of
/// the first-order gradient along the same direction.
fn hvp_err(f: &Fwd, xs: &[Array], dir: &[Array]) -> f64 {
    let (g, leaves, grads) = analytic_grads(f, xs, true);
    let mut s = Tensor::scalar(0.0);
    for (gr, d) in grads.iter().zip(dir) {
        s = s.add(&gr.mul(&Tensor::constant(d.clone())).unwrap().sum().unwrap()).unwrap();
    }
    let analytic: Vec<f64> = if s.requires_grad() {
        let refs: Vec<&Tensor> = leaves.iter().collect();
        g.grad(&s, &refs, false)
            .unwrap()
            .into_iter()
            .zip(xs)
            .flat_map(|(o, x)| match o {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; x.len()],
            })
            .collect()
    } else {
        vec![0.0; xs.iter().map(Array::len).sum()]
    };
    let shift = |sign: f64| -> Vec<Array> {
        xs.iter()
            .zip(dir)
            .map(|(x, d)| {
                let mut y = x.clone();
                for (v, dv) in y.data_mut().iter_mut().zip(d.data()) {
                    *v += sign * H * dv;
                }
                y
            })
            .collect()
    };
    let gp = flat_grads(f, &shift(1.0));
    let gm = flat_grads(f, &shift(-1.0));
    let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * H)).collect();
    rel_err(&analytic, &fd)
}

/// Weighted sum of an op's output so no symmetric cancellation hides errors.
fn weighted(out: Tensor, weights: &Array) -> Result<Tensor> {
    out.mul(&Tensor::constant(weights.clone()))?.sum()
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: fn(&mut ChaCha8Rng, &[Vec<usize>]) -> Vec<Array>,
    out_shape: Vec<usize>,
    op: fn(&[Tensor]) -> Result<Tensor>,
    second_order: bool,
}

fn normal_inputs(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Array> {
    shapes.iter().map(|s| randn(rng, s, 1.0)).collect()
}

fn positive_inputs(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Array> {
    shapes.iter().map(|s| randn(rng, s, 1.0).map(|v| 0.5 + v.abs())).collect()
}

/// Values bounded away from zero so the rectifier kink is never crossed.
fn off_kink_inputs(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Array> {
    shapes
        .iter()
        .map(|s| randn(rng, s, 1.0).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 }))
        .collect()
}

/// A random permutation of well-separated levels so window maxima are unique.
fn distinct_inputs(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Array> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                levels.swap(i, j);
            }
            Array::new(s.clone(), levels).unwrap()
        })
        .collect()
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: normal_inputs,
            out_shape: vec![3, 4],
            op: |x| x[0].add(&x[1]),
            second_order: false,
        },
        Case {
            name: "sub",
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: normal_inputs,
            out_shape: vec![3, 4],
            op: |x| x[0].sub(&x[1]),
            second_order: false,
        },
        Case {
            name: "mul",
            shapes: vec![vec![3, 4], vec![3, 4]],
            build: normal_inputs,
            out_shape: vec![3, 4],
            op: |x| x[0].mul(&x[1]),
            second_order: true,
        },
        Case {
            name: "scale",
            shapes: vec![vec![5]],
            build: normal_inputs,
            out_shape: vec![5],
            op: |x| x[0].scale(-2.5),
            second_order: false,
        },
        Case {
            name: "add_scalar",
            shapes: vec![vec![5]],
            build: normal_inputs,
            out_shape: vec![5],
            op: |x| x[0].add_scalar(0.7),
            second_order: false,
        },
        Case {
            name: "powf",
            shapes: vec![vec![6]],
            build: positive_inputs,
            out_shape: vec![6],
            op: |x| x[0].powf(-0.5),
            second_order: true,
        },
        Case {
            name: "cube",
            shapes: vec![vec![6]],
            build: normal_inputs,
            out_shape: vec![6],
            op: |x| x[0].powf(3.0),
            second_order: true,
        },
        Case {
            name: "exp",
            shapes: vec![vec![6]],
            build: normal_inputs,
            out_shape: vec![6],
            op: |x| x[0].exp(),
            second_order: true,
        },
        Case {
            name: "sigmoid",
            shapes: vec![vec![6]],
            build: normal_inputs,
            out_shape: vec![6],
            op: |x| x[0].sigmoid(),
            second_order: true,
        },
        Case {
            name: "softplus",
            shapes: vec![vec![6]],
            build: normal_inputs,
            out_shape: vec![6],
            op: |x| x[0].softplus(),
            second_order: true,
        },
        Case {
            name: "relu",
            shapes: vec![vec![8]],
            build: off_kink_inputs,
            out_shape: vec![8],
            op: |x| x[0].relu(),
            second_order: true,
        },
        Case {
            name: "masked",
            shapes: vec![vec![8], vec![8]],
            build: off_kink_inputs,
            out_shape: vec![8],
            op: |x| x[0].masked(&x[1]),
            second_order: true,
        },
        Case {
            name: "mul_bcast",
            shapes: vec![vec![2, 3, 4], vec![1, 3, 1]],
            build: normal_inputs,
            out_shape: vec![2, 3, 4],
            op: |x| x[0].mul_bcast(&x[1]),
            second_order: true,
        },
        Case {
            name: "add_bcast",
            shapes: vec![vec![2, 3, 4], vec![2, 1, 4]],
            build: normal_inputs,
            out_shape: vec![2, 3, 4],
            op: |x| x[0].add_bcast(&x[1]),
            second_order: true,
        },
        Case {
            name: "affine_bcast",
            shapes: vec![vec![2, 3, 4], vec![1, 3, 1], vec![1, 3, 1]],
            build: normal_inputs,
            out_shape: vec![2, 3, 4],
            op: |x| x[0].affine_bcast(&x[1], &x[2]),
            second_order: true,
        },
        Case {
            name: "mul_sum_to",
            shapes: vec![vec![2, 3, 4], vec![2, 3, 4]],
            build: normal_inputs,
            out_shape: vec![1, 3, 1],
            op: |x| x[0].mul_sum_to(&x[1], &[1, 3, 1]),
            second_order: true,
        },
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            build: normal_inputs,
            out_shape: vec![3, 2],
            op: |x| x[0].matmul(&x[1]),
            second_order: true,
        },
        Case {
            name: "transpose",
            shapes: vec![vec![3, 4]],
            build: normal_inputs,
            out_shape: vec![4, 3],
            op: |x| x[0].transpose(),
            second_order: false,
        },
        Case {
            name: "reshape",
            shapes: vec![vec![3, 4]],
            build: normal_inputs,
            out_shape: vec![2, 6],
            op: |x| x[0].reshape(&[2, 6]),
            second_order: false,
        },
        Case {
            name: "broadcast_to",
            shapes: vec![vec![1, 3, 1]],
            build: normal_inputs,
            out_shape: vec![2, 3, 4],
            op: |x| x[0].broadcast_to(&[2, 3, 4]),
            second_order: false,
        },
        Case {
            name: "sum_to",
            shapes: vec![vec![2, 3, 4]],
            build: normal_inputs,
            out_shape: vec![1, 3, 1],
            op: |x| x[0].sum_to(&[1, 3, 1]),
            second_order: false,
        },
        Case {
            name: "mean",
            shapes: vec![vec![2, 5]],
            build: normal_inputs,
            out_shape: vec![],
            op: |x| x[0].mean(),
            second_order: false,
        },
        Case {
            name: "variance",
            shapes: vec![vec![4, 3]],
            build: normal_inputs,
            out_shape: vec![1, 3],
            op: |x| feature_variance(&x[0]),
            second_order: true,
        },
        Case {
            name: "conv2d",
            shapes: vec![vec![2, 2, 3, 3], vec![1, 2, 3, 3]],
            build: normal_inputs,
            out_shape: vec![2, 1, 3, 3],
            op: |x| x[0].conv2d(&x[1]),
            second_order: true,
        },
        Case {
            name: "conv2d_kernel_grad",
            shapes: vec![vec![1, 2, 3, 3], vec![1, 3, 3, 3]],
            build: normal_inputs,
            out_shape: vec![3, 2, 3, 3],
            op: |x| x[0].conv2d_kernel_grad(&x[1]),
            second_order: true,
        },
        Case {
            name: "kernel_flip",
            shapes: vec![vec![2, 3, 3, 3]],
            build: normal_inputs,
            out_shape: vec![3, 2, 3, 3],
            op: |x| x[0].kernel_flip(),
            second_order: false,
        },
        Case {
            name: "maxpool2d",
            shapes: vec![vec![2, 2, 4, 4]],
            build: distinct_inputs,
            out_shape: vec![2, 2, 2, 2],
            op: |x| x[0].maxpool2d(),
            second_order: false,
        },
        Case {
            name: "gather",
            shapes: vec![vec![7]],
            build: normal_inputs,
            out_shape: vec![4],
            op: |x| x[0].gather(vec![6, 0, 3, 3], &[4]),
            second_order: false,
        },
        Case {
            name: "logsumexp",
            shapes: vec![vec![3, 5]],
            build: normal_inputs,
            out_shape: vec![3, 1],
            op: |x| x[0].logsumexp_rows(),
            second_order: true,
        },
        Case {
            name: "batchnorm2d",
            shapes: vec![vec![3, 2, 2, 2], vec![2], vec![2]],
            build: normal_inputs,
            out_shape: vec![3, 2, 2, 2],
            op: |x| batchnorm(&x[0], &x[1], &x[2], 1e-5),
            second_order: true,
        },
        Case {
            name: "batchnorm1d",
            shapes: vec![vec![4, 3], vec![3], vec![3]],
            build: normal_inputs,
            out_shape: vec![4, 3],
            op: |x| batchnorm(&x[0], &x[1], &x[2], 1e-5),
            second_order: true,
        },
        Case {
            name: "l2_norm",
            shapes: vec![vec![2, 3]],
            build: normal_inputs,
            out_shape: vec![],
            op: |x| l2_norm(&x[0]),
            second_order: true,
        },
        Case {
            name: "scale_by",
            shapes: vec![vec![2, 3], vec![1]],
            build: normal_inputs,
            out_shape: vec![2, 3],
            op: |x| scale_by(&x[0], &x[1]),
            second_order: true,
        },
        Case {
            name: "linear",
            shapes: vec![vec![3, 4], vec![2, 4], vec![2]],
            build: normal_inputs,
            out_shape: vec![3, 2],
            op: |x| linear(&x[0], &x[1], &x[2]),
            second_order: true,
        },
        Case {
            name: "cross_entropy",
            shapes: vec![vec![4, 3]],
            build: normal_inputs,
            out_shape: vec![],
            op: |x| softmax_cross_entropy(&x[0], &[0, 2, 1, 2]),
            second_order: true,
        },
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    for case in cases() {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = (case.build)(&mut rng, &case.shapes);
            assert!(xs.iter().map(Array::len).sum::<usize>() <= 64);
            let w = randn(&mut rng, &case.out_shape, 1.0);
            let op = case.op;
            let f = move |t: &[Tensor]| weighted(op(t)?, &w);
            let e = rel_err(&flat_grads(&f, &xs), &fd_grads(&f, &xs));
            worst = worst.max(e);
        }
        assert!(worst < 1e-4, "{}: worst relative error {worst:e}", case.name);
    }
}

#[test]
fn second_order_matches_finite_differences_of_gradients() {
    for case in cases().into_iter().filter(|c| c.second_order) {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let xs = (case.build)(&mut rng, &case.shapes);
            let dir: Vec<Array> = case.shapes.iter().map(|s| randn(&mut rng, s, 1.0)).collect();
            let w = randn(&mut rng, &case.out_shape, 1.0);
            let op = case.op;
            let f = move |t: &[Tensor]| weighted(op(t)?, &w);
            worst = worst.max(hvp_err(&f, &xs, &dir));
        }
        assert!(worst < 1e-3, "{}: worst HVP relative error {worst:e}", case.name);
    }
}

#[test]
fn linear_sum_gradient() {
    let g = Graph::new();
    let v = g.leaf(Array::from_vec(vec![1.0, 2.0]));
    let x = Tensor::constant(Array::from_vec(vec![3.0, 4.0]));
    let loss = v.mul(&x).unwrap().sum().unwrap();
    let grads = g.backward(&loss, false).unwrap();
    assert_eq!(grads.get(&v).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn cube_second_derivative() {
    let g = Graph::new();
    let x = g.leaf(Array::scalar(2.0));
    let y = x.powf(3.0).unwrap();
    let dy = g.grad(&y, &[&x], true).unwrap().remove(0).unwrap();
    assert!((dy.item() - 12.0).abs() < 1e-12);
    let d2 = g.grad(&dy, &[&x], false).unwrap().remove(0).unwrap();
    assert!((d2.item() - 12.0).abs() < 1e-12);
}

fn mlp_loss(t: &[Tensor]) -> Result<Tensor> {
    // t: x, w1, b1, w2, b2
    let h = linear(&t[0], &t[1], &t[2])?.softplus()?;
    let z = linear(&h, &t[3], &t[4])?;
    softmax_cross_entropy(&z, &[0, 1, 2, 1, 0])
}

#[test]
fn two_layer_mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Array> = [vec![5, 4], vec![6, 4], vec![6], vec![3, 6], vec![3]]
        .iter()
        .map(|s| randn(&mut rng, s, 1.0))
        .collect();
    let f: &Fwd = &mlp_loss;
    let a = flat_grads(f, &xs);
    let n = fd_grads(f, &xs);
    let max_rel = a
        .iter()
        .zip(&n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max);
    assert!(max_rel < 1e-4, "max elementwise relative error {max_rel:e}");
}

#[test]
fn softplus_of_zero_is_ln_two() {
    let y = Tensor::scalar(0.0).softplus().unwrap();
    assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn batchnorm_of_unit_batch_pair_is_identity() {
    let x = Tensor::constant(Array::new(vec![2, 1], vec![1.0, -1.0]).unwrap());
    let one = Tensor::constant(Array::ones(&[1]));
    let zero = Tensor::constant(Array::zeros(&[1]));
    let y = batchnorm(&x, &one, &zero, 0.0).unwrap();
    assert_eq!(y.data(), &[1.0, -1.0]);
}

#[test]
fn batchnorm_rejects_single_sample_batches() {
    let x = Tensor::constant(Array::ones(&[1, 3]));
    let p = Tensor::constant(Array::ones(&[3]));
    let err = batchnorm(&x, &p, &p, 1e-5).unwrap_err();
    assert_eq!(err, cxgrad::autodiff::AdError::DegenerateBatch(1));
}

#[test]
fn shape_errors_name_the_op() {
    let a = Tensor::constant(Array::zeros(&[2, 3]));
    let b = Tensor::constant(Array::zeros(&[3, 2]));
    let msg = a.add(&b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let msg = a.matmul(&a).unwrap_err().to_string();
    assert!(msg.starts_with("matmul"), "{msg}");
    let x = Tensor::constant(Array::zeros(&[1, 2, 4, 4]));
    let k = Tensor::constant(Array::zeros(&[1, 3, 3, 3]));
    assert!(x.conv2d(&k).unwrap_err().to_string().starts_with("conv2d"));
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let g = Graph::new();
    let v = g.leaf(Array::ones(&[2]));
    assert!(matches!(g.backward(&v, false), Err(cxgrad::autodiff::AdError::NonScalarLoss(_))));
    let c = Tensor::scalar(1.0);
    assert!(matches!(g.backward(&c, false), Err(cxgrad::autodiff::AdError::DetachedLoss)));
    let other = Graph::new();
    let w = other.leaf(Array::scalar(1.0));
    assert!(matches!(g.backward(&w, false), Err(cxgrad::autodiff::AdError::GraphMismatch)));
}

#[test]
fn cleared_graph_rejects_stale_tensors() {
    let g = Graph::new();
    let v = g.leaf(Array::ones(&[2]));
    g.clear();
    assert!(g.is_empty());
    assert_eq!(v.add(&v).unwrap_err(), cxgrad::autodiff::AdError::StaleTensor);
}

#[test]
fn constants_are_not_recorded() {
    let g = Graph::new();
    let a = Tensor::constant(Array::ones(&[3]));
    let b = a.mul(&a).unwrap().exp().unwrap();
    assert!(!b.requires_grad());
    assert!(g.is_empty());
    let leaf = g.leaf(Array::ones(&[3]));
    let c = leaf.mul(&a).unwrap();
    assert!(c.requires_grad());
    let grads = g.backward(&c.sum().unwrap(), false).unwrap();
    assert!(grads.get(&a).is_none());
    assert_eq!(grads.len(), 1);
}

#[test]
fn grad_through_intermediate_targets_is_total_derivative() {
    // y = u * x with u = 3x: dy/du = x, dy/dx total = u + 3x = 6x
    let g = Graph::new();
    let x = g.leaf(Array::scalar(2.0));
    let u = x.scale(3.0).unwrap();
    let y = u.mul(&x).unwrap();
    let r = g.grad(&y, &[&u, &x], false).unwrap();
    assert_eq!(r[0].as_ref().unwrap().item(), 2.0);
    assert_eq!(r[1].as_ref().unwrap().item(), 12.0);
    let unused = g.leaf(Array::scalar(0.0));
    assert!(g.grad(&y, &[&unused], false).unwrap()[0].is_none());
}

#[test]
fn create_graph_gradients_are_recorded() {
    let g = Graph::new();
    let x = g.leaf(Array::from_vec(vec![0.3, -0.2]));
    let y = x.exp().unwrap().sum().unwrap();
    let d = g.grad(&y, &[&x], true).unwrap().remove(0).unwrap();
    assert!(d.requires_grad());
    let d = g.grad(&y, &[&x], false).unwrap().remove(0).unwrap();
    assert!(!d.requires_grad());
}
