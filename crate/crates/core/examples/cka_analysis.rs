//! Representation change during adaptation: linear CKA between each
//! block's query features before and after the inner loop, for both
//! learners after a short meta-training run.

use cxgrad::analysis::cka_all_layers;
use cxgrad::meta::{outer_step, Adam, InnerLoopConfig, LearnerKind, MetaKnowledge};
use cxgrad::nn::ModelConfig;
use cxgrad::run::{episode_stream, EpisodeConfig};
use cxgrad::tasks::{Split, SyntheticConfig, TaskSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let source = TaskSource::synthetic(&SyntheticConfig::default())?;
    let ep = EpisodeConfig::default();
    let cfg = InnerLoopConfig::default();
    for kind in [LearnerKind::Maml, LearnerKind::Cxgrad] {
        let mut meta = MetaKnowledge::init(kind, &ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut adam = Adam::new(cfg.eta);
        let mut train = episode_stream(&source, Split::Train, &ep, 0, "train-episodes");
        for _ in 0..20 {
            let batch = train.by_ref().take(4).collect::<cxgrad::Result<Vec<_>>>()?;
            outer_step(&mut meta, &batch, &cfg, &mut adam, 1)?;
        }
        let held_out = episode_stream(&source, Split::Test, &ep, 1, "analyze-episodes").take(20);
        for rec in cka_all_layers(&meta, kind, held_out, &cfg)? {
            println!("{kind} layer {}: CKA {:.4} ± {:.4}", rec.layer, rec.cka_mean, rec.ci95);
        }
    }
    Ok(())
}
