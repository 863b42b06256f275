//! Batch normalization ignores a positive rescaling of the conv weights in
//! front of it and divides their gradient by the same factor.

use cxgrad::autodiff::functional::softmax_cross_entropy;
use cxgrad::autodiff::{Array, Graph, Tensor};
use cxgrad::nn::{ModelConfig, Theta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut theta = Theta::init(&cfg, &mut rng);
    // large weights keep ε negligible next to the pre-BN variance
    for b in &mut theta.backbone.blocks {
        b.weight = b.weight.map(|w| w * 1e3);
    }
    let n = 5;
    let pixels = (0..n * cfg.image_size * cfg.image_size).map(|_| rng.random::<f64>()).collect();
    let x = Tensor::constant(Array::new(vec![n, 1, cfg.image_size, cfg.image_size], pixels)?);
    let labels: Vec<usize> = (0..n).collect();

    let run = |a: f64| -> cxgrad::Result<(Vec<f64>, f64)> {
        let mut t = theta.clone();
        t.backbone.blocks[1].weight = t.backbone.blocks[1].weight.map(|w| w * a);
        let g = Graph::new();
        let leaves = t.leaves(&g);
        let logits = leaves.logits(&x)?;
        let loss = softmax_cross_entropy(&logits, &labels)?;
        let d = g.grad(&loss, &[&leaves.backbone.blocks[1].weight], false)?[0]
            .clone()
            .expect("layer 2 grad");
        Ok((logits.data().to_vec(), d.value().norm()))
    };
    let (base, base_norm) = run(1.0)?;
    println!("{:>6} {:>14} {:>14}", "a", "max |Δlogit|", "a·‖g‖/‖g₀‖");
    for a in [0.1, 0.5, 2.0, 10.0] {
        let (out, gn) = run(a)?;
        let diff = out.iter().zip(&base).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        println!("{a:>6} {diff:>14.3e} {:>14.10}", a * gn / base_norm);
    }
    Ok(())
}
