//! Second-order differentiation: a Hessian-vector product and the gradient
//! of a loss taken after one gradient-descent step.

use cxgrad::autodiff::{Array, Graph, Tensor};

fn main() -> cxgrad::Result<()> {
    // f(x, y) = x²y + y³
    let g = Graph::new();
    let p = g.leaf(Array::from_vec(vec![1.5, -0.5]));
    let x = p.gather(vec![0], &[])?;
    let y = p.gather(vec![1], &[])?;
    let f = x.mul(&x)?.mul(&y)?.add(&y.mul(&y)?.mul(&y)?)?;
    let grad = g.grad(&f, &[&p], true)?[0].clone().expect("p reaches f");
    println!("∇f = {:?}", grad.data());

    // Hv = ∇(∇f · v)
    let v = Tensor::constant(Array::from_vec(vec![1.0, 2.0]));
    let hv = g.grad(&grad.mul(&v)?.sum()?, &[&p], false)?[0].clone().expect("second order");
    // H = [[2y, 2x], [2x, 6y]]
    println!(
        "Hv = {:?} (expected [{}, {}])",
        hv.data(),
        2.0 * -0.5 + 2.0 * 2.0 * 1.5,
        2.0 * 1.5 + 2.0 * 6.0 * -0.5
    );

    // d/dθ L(θ − α∇L(θ)) with L(θ) = θ⁴
    let theta = g.leaf(Array::scalar(0.8));
    let alpha = 0.1;
    let loss = |t: &Tensor| t.powf(4.0);
    let inner = g.grad(&loss(&theta)?, &[&theta], true)?[0].clone().expect("inner grad");
    let adapted = theta.sub(&inner.scale(alpha)?)?;
    let outer = g.grad(&loss(&adapted)?, &[&theta], false)?[0].clone().expect("outer grad");
    let t: f64 = 0.8;
    let expected = 4.0 * (t - alpha * 4.0 * t.powi(3)).powi(3) * (1.0 - alpha * 12.0 * t * t);
    println!("outer gradient {:.12} (closed form {:.12})", outer.item(), expected);
    Ok(())
}
