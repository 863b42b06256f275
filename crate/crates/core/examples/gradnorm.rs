//! Per-layer support-gradient norms during adaptation, averaged over a
//! batch of episodes, and the share of the last backbone layer.

use cxgrad::analysis::layer_grad_norms;
use cxgrad::meta::{adapt_with, InnerLoopConfig, LearnerKind, MetaKnowledge};
use cxgrad::nn::ModelConfig;
use cxgrad::run::{episode_stream, EpisodeConfig};
use cxgrad::tasks::{Split, SyntheticConfig, TaskSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let source = TaskSource::synthetic(&SyntheticConfig::default())?;
    let cfg = InnerLoopConfig {
        second_order: false,
        ..InnerLoopConfig::default()
    };
    for kind in [LearnerKind::Maml, LearnerKind::Cxgrad] {
        let meta = MetaKnowledge::init(kind, &ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let results = episode_stream(&source, Split::Test, &EpisodeConfig::default(), 2, "analyze-episodes")
            .take(10)
            .map(|e| adapt_with(&meta, kind, &e?, &cfg, false))
            .collect::<cxgrad::Result<Vec<_>>>()?;
        let rec = layer_grad_norms(0, &results)?;
        println!("{kind}: norms {:.4?}, layer-4 share {:.3}", rec.norms(), rec.top_layer_share());
    }
    Ok(())
}
