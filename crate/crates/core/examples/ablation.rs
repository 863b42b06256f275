//! Ablation grid over the context scheme, the number of inner steps and the
//! context learning rate. Every variant writes the usual run CSVs; a
//! summary table with one row per variant goes to `ablation.csv`.
//!
//! `cargo run --release --example ablation -- [iterations] [out_dir]`

use std::path::PathBuf;

use cxgrad::analysis::write_csv;
use cxgrad::meta::ContextScheme;
use cxgrad::run::{cmd_eval, cmd_train, EvalOptions, Preset, RunConfig};
use serde::Serialize;

#[derive(Serialize)]
struct Row {
    run_id: String,
    context_scheme: String,
    steps: usize,
    beta: f64,
    iterations: u64,
    best_val_accuracy: Option<f64>,
    test_accuracy: f64,
    test_ci95: f64,
}

fn main() -> cxgrad::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args
        .next()
        .map_or(Ok(50), |s| s.parse())
        .map_err(|e| cxgrad::Error::InvalidInput(format!("{e}")))?;
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("cxgrad-ablation"), PathBuf::from);

    let mut variants = Vec::new();
    for scheme in [ContextScheme::TaskWise, ContextScheme::StepWise] {
        variants.push((scheme, 5, 1.0));
    }
    for steps in 1..=5 {
        variants.push((ContextScheme::TaskWise, steps, 1.0));
    }
    for beta in [0.01, 0.1, 1.0] {
        variants.push((ContextScheme::TaskWise, 5, beta));
    }
    variants.dedup();

    let mut rows = Vec::new();
    for (scheme, steps, beta) in variants {
        let mut cfg = RunConfig::preset(Preset::Desk);
        cfg.iterations = iterations;
        cfg.val_every = iterations.max(1);
        cfg.val_tasks = 50;
        cfg.output_dir = out.clone();
        cfg.inner.context_scheme = scheme;
        cfg.inner.steps = steps;
        cfg.inner.beta = beta;
        cfg.run_id = Some(format!("{scheme}-s{steps}-b{beta}"));
        let m = cmd_train(&cfg)?;
        let r = cmd_eval(
            &m.best_checkpoint,
            &EvalOptions {
                n_tasks: 100,
                ..EvalOptions::default()
            },
        )?;
        println!("{}: test {}", m.run_id, r.accuracy);
        rows.push(Row {
            run_id: m.run_id,
            context_scheme: scheme.to_string(),
            steps,
            beta,
            iterations: m.iterations_run,
            best_val_accuracy: m.best_val_accuracy,
            test_accuracy: r.accuracy.mean,
            test_ci95: r.accuracy.ci95,
        });
    }
    let path = out.join("ablation.csv");
    write_csv(&path, &rows)?;
    println!("summary in {}", path.display());
    Ok(())
}
