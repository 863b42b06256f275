//! Meta-trains a learner with the desk preset, stopping early once the
//! validation accuracy clears a threshold, then evaluates the best
//! checkpoint on held-out episodes.
//!
//! `cargo run --release --example train_eval -- [maml|cxgrad] [out_dir]`

use std::path::PathBuf;

use cxgrad::meta::LearnerKind;
use cxgrad::run::{cmd_eval, cmd_train, EvalOptions, Preset, RunConfig};

fn main() -> cxgrad::Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let mut args = std::env::args().skip(1);
    let learner: LearnerKind = args.next().as_deref().unwrap_or("cxgrad").parse()?;
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.learner = learner;
    cfg.output_dir = args.next().map_or_else(|| std::env::temp_dir().join("cxgrad-runs"), PathBuf::from);
    cfg.val_every = 25;
    cfg.early_stop_accuracy = Some(0.9);
    let manifest = cmd_train(&cfg)?;
    println!(
        "{}: {} iterations, best validation accuracy {:?} at iteration {}",
        manifest.run_id, manifest.iterations_run, manifest.best_val_accuracy, manifest.best_iteration
    );
    let report = cmd_eval(
        &manifest.best_checkpoint,
        &EvalOptions {
            n_tasks: 200,
            ..EvalOptions::default()
        },
    )?;
    println!("test accuracy {}, outputs in {}", report.accuracy, cfg.run_dir().display());
    Ok(())
}
