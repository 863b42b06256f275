//! Command-line front end: `train`, `eval`, `analyze`.
//!
//! Exit codes: 0 success (including `--help`), 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{Preset, RunConfig, SourceKind, TaskConfig};
use super::{cmd_analyze, cmd_eval, cmd_train, EvalOptions, Metric};
use crate::error::{Error, Result};
use crate::meta::{ContextScheme, LearnerKind};
use crate::tasks::{Family, Split};

#[derive(Debug, Parser)]
#[command(name = "cxgrad", version, about = "Meta-learning with MAML and contextual gradient scaling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a model.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on held-out episodes.
    Eval(EvalArgs),
    /// Write diagnostic CSVs for a checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset when no config file is given.
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub learner: Option<LearnerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub n_query: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stop gradients through the inner updates.
    #[arg(long)]
    pub first_order: bool,
    #[arg(long)]
    pub context_scheme: Option<ContextScheme>,
    #[arg(long)]
    pub head_only: bool,
    #[arg(long)]
    pub freeze_subnetwork: bool,
    #[arg(long)]
    pub unit_norm_init: bool,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub val_every: Option<u64>,
    #[arg(long)]
    pub val_tasks: Option<usize>,
    #[arg(long)]
    pub early_stop_accuracy: Option<f64>,
    #[arg(long)]
    pub landscape_every: Option<u64>,
    #[command(flatten)]
    pub tasks: TaskArgs,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Default)]
pub struct TaskArgs {
    /// Directory dataset root (switches the source to `directory`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl TaskArgs {
    fn apply(&self, t: &mut TaskConfig) -> bool {
        let mut changed = false;
        if let Some(p) = &self.dataset {
            t.source = SourceKind::Directory;
            t.path = Some(p.clone());
            changed = true;
        }
        if let Some(f) = self.family {
            t.source = SourceKind::Synthetic;
            t.family = f;
            changed = true;
        }
        if let Some(n) = self.noise {
            t.noise = n;
            changed = true;
        }
        if let Some(s) = self.data_seed {
            t.data_seed = s;
            changed = true;
        }
        changed
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 600)]
    pub n_tasks: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub tasks: TaskArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// gradnorm | cka | landscape | embeddings
    #[arg(long)]
    pub metric: Metric,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 100)]
    pub n_tasks: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub tasks: TaskArgs,
}

impl TrainArgs {
    /// Base config (file or preset), then env output root, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(self.preset),
        }
        .with_env_output_root();
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {$(
                if let Some(v) = self.$flag.clone() { c.$($field).+ = v; }
            )*};
        }
        set!(learner => learner, seed => seed, iterations => iterations, output_dir => output_dir,
             workers => workers, n_way => episode.n_way, k_shot => episode.k_shot, n_query => episode.n_query,
             alpha => inner.alpha, beta => inner.beta, eta => inner.eta, steps => inner.steps,
             context_scheme => inner.context_scheme, width => model.width, image_size => model.image_size,
             val_every => val_every, val_tasks => val_tasks, landscape_every => landscape_every);
        if let Some(n) = self.n_way {
            c.model.n_way = n;
        }
        if self.run_id.is_some() {
            c.run_id = self.run_id.clone();
        }
        if self.batch_size.is_some() {
            c.batch_size = self.batch_size;
        }
        if self.early_stop_accuracy.is_some() {
            c.early_stop_accuracy = self.early_stop_accuracy;
        }
        c.inner.second_order &= !self.first_order;
        c.inner.head_only |= self.head_only;
        c.inner.freeze_subnetwork |= self.freeze_subnetwork;
        c.unit_norm_init |= self.unit_norm_init;
        self.tasks.apply(&mut c.tasks);
        c.validate()?;
        Ok(c)
    }
}

fn eval_options(
    split: Split,
    n_tasks: usize,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    tasks: &TaskArgs,
    checkpoint: &std::path::Path,
) -> Result<EvalOptions> {
    let mut t = None;
    let mut base = super::Checkpoint::load(checkpoint)?.config.tasks;
    if tasks.apply(&mut base) {
        t = Some(base);
    }
    Ok(EvalOptions {
        split,
        n_tasks,
        seed,
        tasks: t,
        out_dir,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            if args.dry_run {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let m = cmd_train(&cfg)?;
            println!(
                "{}: {} iterations, best val accuracy {} at iteration {}, checkpoint {}",
                m.run_id,
                m.iterations_run,
                m.best_val_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                m.best_iteration,
                m.best_checkpoint.display()
            );
        }
        Command::Eval(a) => {
            let opts = eval_options(a.split, a.n_tasks, a.seed, a.out_dir, &a.tasks, &a.checkpoint)?;
            let r = cmd_eval(&a.checkpoint, &opts)?;
            println!("{} [{}] accuracy {}", r.run_id, r.split, r.accuracy);
        }
        Command::Analyze(a) => {
            let opts = eval_options(a.split, a.n_tasks, a.seed, a.out_dir, &a.tasks, &a.checkpoint)?;
            for p in cmd_analyze(&a.checkpoint, a.metric, &opts)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => 1,
                _ => 2,
            }
        }
    }
}

/// Entry point for the binary: logs to stderr (`RUST_LOG`, default `info`).
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    main_with_args(std::env::args_os())
}
