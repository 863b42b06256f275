//! Loss landscape along the inner-loop gradient: mean support loss and
//! gradient change at eight rates around α, with the derived loss
//! variation, gradient predictiveness and effective β.

use cxgrad::analysis::landscape_metrics;
use cxgrad::meta::{InnerLoopConfig, LearnerKind, MetaKnowledge};
use cxgrad::nn::ModelConfig;
use cxgrad::run::{episode_stream, EpisodeConfig};
use cxgrad::tasks::{Split, SyntheticConfig, TaskSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let source = TaskSource::synthetic(&SyntheticConfig::default())?;
    let batch = episode_stream(&source, Split::Train, &EpisodeConfig::default(), 0, "train-episodes")
        .take(4)
        .collect::<cxgrad::Result<Vec<_>>>()?;
    let cfg = InnerLoopConfig::default();
    for kind in [LearnerKind::Maml, LearnerKind::Cxgrad] {
        let meta = MetaKnowledge::init(kind, &ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let (rec, sweep) = landscape_metrics(&meta, kind, &batch, &cfg, 0)?;
        println!(
            "{kind}: loss variation {:.3e}, gradient predictiveness {:.3e}, effective β {:?}",
            rec.loss_variation, rec.gradient_predictiveness, rec.effective_beta
        );
        for row in sweep.rows(0) {
            println!(
                "  rate {:.4}: loss {:.6}, ‖Δg‖ {:.4e}",
                row.rate, row.mean_loss, row.mean_grad_change
            );
        }
        println!("  loss after the step taken: {:.6}", sweep.loss_at_alpha);
    }
    Ok(())
}
