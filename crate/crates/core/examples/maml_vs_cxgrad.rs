//! Adapts the same initialization to one episode with MAML and CxGrad and
//! prints the support loss, accuracy and scaling factors step by step.

use cxgrad::meta::{accuracy, adapt_with, InnerLoopConfig, LearnerKind, MetaKnowledge};
use cxgrad::nn::ModelConfig;
use cxgrad::tasks::{sample_episode, Split, SyntheticConfig, TaskSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cxgrad::Result<()> {
    let model = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut meta = MetaKnowledge::init(LearnerKind::Cxgrad, &model, &mut rng);
    // a non-trivial sub-network so γ reacts to ν
    let phi = meta.phi.as_mut().expect("cxgrad");
    for v in phi.w2.data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }

    let source = TaskSource::synthetic(&SyntheticConfig::default())?;
    let episode = sample_episode(&source, Split::Test, 5, 1, 15, &mut rng)?;
    let cfg = InnerLoopConfig {
        alpha: 0.1,
        ..InnerLoopConfig::default()
    };
    for kind in [LearnerKind::Maml, LearnerKind::Cxgrad] {
        let r = adapt_with(&meta, kind, &episode, &cfg, false)?;
        let acc = accuracy(&r.theta.constants(), &episode.query)?;
        println!("{kind}: support losses {:.4?}, query accuracy {acc:.3}", r.support_losses);
        for (i, g) in r.gammas.iter().enumerate() {
            println!("  γ[{i}] = {g:.4?}");
        }
        if let Some(nu) = r.context {
            println!("  ‖ν‖ = {:.3e}", nu.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(())
}
