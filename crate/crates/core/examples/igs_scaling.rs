//! Implicit gradient scaling: renormalizing each conv layer to γ·w/‖w‖
//! leaves the loss alone and rescales that layer's gradient by ‖w‖/γ.

use cxgrad::autodiff::{Array, Graph, Tensor};
use cxgrad::meta::{igs, support_loss, LearnerKind, MetaKnowledge};
use cxgrad::nn::{layer_norms, ContextParams, ModelConfig, NUM_LAYERS};
use cxgrad::tasks::{sample_episode, Split, SyntheticConfig, TaskSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut meta = MetaKnowledge::init(LearnerKind::Cxgrad, &cfg, &mut rng);
    meta.theta = meta.theta.unit_normalized()?;
    for (l, b) in meta.theta.backbone.blocks.iter_mut().enumerate() {
        let n = 1e4 * (l + 1) as f64;
        b.weight = b.weight.map(|w| w * n);
    }
    // ask the sub-network for γ ≈ 2·10⁴ in every layer
    let phi = meta.phi.as_mut().expect("cxgrad");
    phi.b2 = Array::full(phi.b2.shape(), 2e4);

    let source = TaskSource::synthetic(&SyntheticConfig::default())?;
    let episode = sample_episode(&source, Split::Train, 5, 1, 15, &mut rng)?;

    let grads = |theta: &cxgrad::nn::Theta<Array>| -> cxgrad::Result<(f64, Vec<f64>)> {
        let g = Graph::new();
        let t = theta.leaves(&g);
        let loss = support_loss(&t, &episode.support)?;
        let ws: Vec<&Tensor> = t.backbone.blocks.iter().map(|b| &b.weight).collect();
        let norms = g
            .grad(&loss, &ws, false)?
            .into_iter()
            .map(|d| d.map_or(0.0, |d| d.value().norm()))
            .collect();
        Ok((loss.item(), norms))
    };
    let (loss, before) = grads(&meta.theta)?;
    let ctx = ContextParams::reset(&Graph::new(), cfg.context_dim);
    let phi = meta.phi.as_ref().expect("cxgrad").map(|a| Tensor::constant(a.clone()));
    let (scaled, gamma) = igs(&meta.theta.constants(), &ctx, &phi)?;
    let scaled = scaled.values();
    let (loss_after, after) = grads(&scaled)?;
    println!("support loss {loss:.10} → {loss_after:.10}");
    let (w, gamma) = (layer_norms(&meta.theta), gamma.values());
    println!("{:>5} {:>10} {:>10} {:>14} {:>14}", "layer", "‖w‖", "γ", "‖g'‖/‖g‖", "‖w‖/γ");
    for l in 0..NUM_LAYERS {
        println!(
            "{:>5} {:>10.1} {:>10.1} {:>14.8} {:>14.8}",
            l + 1,
            w[l],
            gamma[l],
            after[l] / before[l],
            w[l] / gamma[l]
        );
    }
    Ok(())
}
