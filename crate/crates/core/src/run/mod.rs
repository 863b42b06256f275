//! Training, evaluation and analysis drivers. All outputs of a run land in
//! `output_dir/run_id/`; files are named `{run_id}.{metric}.csv`.
//!
//! Randomness: every component draws from its own stream,
//! `seed::stream(seed, tag)`, with tags `init`, `train-episodes`,
//! `val-episodes`, `eval-episodes` and `analyze-episodes`.

pub mod checkpoint;
pub mod cli;
pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    cka_all_layers, export_embeddings, landscape_metrics, layer_grad_norms, write_csv, write_embeddings_csv, GradNormRecord,
    LandscapeRecord, Stage, SweepRow,
};
use crate::error::{Error, Result};
use crate::meta::{evaluate, outer_step, Adam, MeanCi, MetaKnowledge};
use crate::seed;
use crate::tasks::{sample_episode, Episode, Split, TaskSource};

pub use checkpoint::Checkpoint;
pub use config::{EpisodeConfig, Preset, RunConfig, SourceKind, TaskConfig};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub query_loss: f64,
    pub query_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_ci95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub seed: u64,
    pub code_version: String,
    pub iterations_run: u64,
    pub best_val_accuracy: Option<f64>,
    pub best_iteration: u64,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics: Vec<IterationLog>,
    /// Other files written, relative to the run directory.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A lazy stream of episodes from `split`, reproducible from `(seed, tag)`.
pub fn episode_stream<'a>(
    source: &'a TaskSource,
    split: Split,
    episode: &'a EpisodeConfig,
    seed: u64,
    tag: &str,
) -> impl Iterator<Item = Result<Episode>> + 'a {
    let mut rng = seed::stream(seed, tag);
    std::iter::repeat_with(move || sample_episode(source, split, episode.n_way, episode.k_shot, episode.n_query, &mut rng))
}

fn validate_model(meta: &MetaKnowledge, source: &TaskSource, cfg: &RunConfig) -> Result<MeanCi> {
    evaluate(
        meta,
        episode_stream(source, Split::Val, &cfg.episode, cfg.seed, "val-episodes"),
        &cfg.inner,
        cfg.val_tasks,
    )
}

/// Meta-trains per `cfg`. Writes `best.ckpt` (highest validation accuracy;
/// the initialization when nothing beats it), `last.ckpt`, the metric CSVs
/// and `manifest.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let source = cfg.tasks.build(&cfg.model)?;
    let run_id = cfg.run_id();
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;

    let mut meta = MetaKnowledge::init(cfg.learner, &cfg.model, &mut seed::stream(cfg.seed, "init"));
    if cfg.unit_norm_init {
        meta.theta = meta.theta.unit_normalized()?;
    }
    let mut adam = Adam::for_params(cfg.inner.eta, &meta.named().into_iter().map(|(_, a)| a).collect::<Vec<_>>());
    let best_path = dir.join("best.ckpt");
    let last_path = dir.join("last.ckpt");
    let snapshot = |meta: &MetaKnowledge, adam: &Adam, iteration: u64| Checkpoint {
        config: cfg.clone(),
        iteration,
        meta: meta.clone(),
        adam: adam.clone(),
    };
    snapshot(&meta, &adam, 0).save(&best_path)?;

    let mut train_rng = seed::stream(cfg.seed, "train-episodes");
    let mut metrics = Vec::new();
    let mut gradnorms: Vec<GradNormRecord> = Vec::new();
    let mut landscape: Vec<LandscapeRecord> = Vec::new();
    let mut sweep: Vec<SweepRow> = Vec::new();
    let mut best: Option<f64> = None;
    let mut best_iteration = 0;
    let mut iterations_run = 0;
    let ep = &cfg.episode;
    for it in 1..=cfg.iterations {
        let batch = (0..cfg.batch_size())
            .map(|_| sample_episode(&source, Split::Train, ep.n_way, ep.k_shot, ep.n_query, &mut train_rng))
            .collect::<Result<Vec<_>>>()?;
        if cfg.landscape_every > 0 && (it - 1) % cfg.landscape_every == 0 {
            let (rec, sw) = landscape_metrics(&meta, cfg.learner, &batch, &cfg.inner, it)?;
            sweep.extend(sw.rows(it));
            landscape.push(rec);
        }
        let m = outer_step(&mut meta, &batch, &cfg.inner, &mut adam, cfg.workers)?;
        gradnorms.push(layer_grad_norms(it, &m.adaptations)?);
        let mut log = IterationLog {
            iteration: it,
            query_loss: m.query_loss,
            query_accuracy: m.query_accuracy,
            val_accuracy: None,
            val_ci95: None,
        };
        iterations_run = it;
        let validate_now = (cfg.val_every > 0 && it % cfg.val_every == 0) || it == cfg.iterations;
        let mut stop = false;
        if validate_now {
            let acc = validate_model(&meta, &source, cfg)?;
            info!(
                "{run_id} it {it}: loss {:.4} train acc {:.3} val {acc}",
                m.query_loss, m.query_accuracy
            );
            log.val_accuracy = Some(acc.mean);
            log.val_ci95 = Some(acc.ci95);
            if best.is_none_or(|b| acc.mean > b) {
                best = Some(acc.mean);
                best_iteration = it;
                snapshot(&meta, &adam, it).save(&best_path)?;
            }
            stop = cfg.early_stop_accuracy.is_some_and(|t| acc.mean >= t);
        }
        metrics.push(log);
        if stop {
            info!("{run_id}: early stop at iteration {it}");
            break;
        }
    }
    snapshot(&meta, &adam, iterations_run).save(&last_path)?;

    let mut files = Vec::new();
    let mut emit = |name: String| -> PathBuf {
        let p = dir.join(&name);
        files.push(name);
        p
    };
    write_csv(&emit(format!("{run_id}.train.csv")), &metrics)?;
    write_csv(&emit(format!("{run_id}.gradnorm.csv")), &gradnorms)?;
    if cfg.landscape_every > 0 {
        write_csv(&emit(format!("{run_id}.landscape.csv")), &landscape)?;
        write_csv(&emit(format!("{run_id}.landscape_sweep.csv")), &sweep)?;
    }
    let manifest = RunManifest {
        run_id,
        config: cfg.clone(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        iterations_run,
        best_val_accuracy: best,
        best_iteration,
        best_checkpoint: best_path,
        final_checkpoint: last_path,
        metrics,
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(Error::io(&path))?;
    Ok(manifest)
}

/// Options shared by [`cmd_eval`] and [`cmd_analyze`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub n_tasks: usize,
    /// Episode seed; defaults to the checkpoint's run seed.
    pub seed: Option<u64>,
    /// Replaces the checkpoint's task source (e.g. a second domain).
    pub tasks: Option<TaskConfig>,
    /// Where outputs go; defaults to the checkpoint's directory.
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            n_tasks: 600,
            seed: None,
            tasks: None,
            out_dir: None,
        }
    }
}

struct Loaded {
    ckpt: Checkpoint,
    source: TaskSource,
    seed: u64,
    out_dir: PathBuf,
    run_id: String,
}

fn load_for(checkpoint: &Path, opts: &EvalOptions) -> Result<Loaded> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let tasks = opts.tasks.clone().unwrap_or_else(|| ckpt.config.tasks.clone());
    let source = tasks.build(&ckpt.config.model)?;
    if opts.split == Split::Train {
        warn!("evaluating on the train split: classes were seen during meta-training");
    }
    let out_dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    Ok(Loaded {
        seed: opts.seed.unwrap_or(ckpt.config.seed),
        run_id: ckpt.config.run_id(),
        ckpt,
        source,
        out_dir,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub split: Split,
    pub iteration: u64,
    pub accuracy: MeanCi,
}

/// Accuracy ± 95% CI over `n_tasks` episodes; also written to
/// `{run_id}.eval.{split}.json`.
pub fn cmd_eval(checkpoint: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let l = load_for(checkpoint, opts)?;
    let c = &l.ckpt.config;
    let accuracy = evaluate(
        &l.ckpt.meta,
        episode_stream(&l.source, opts.split, &c.episode, l.seed, "eval-episodes"),
        &c.inner,
        opts.n_tasks,
    )?;
    let report = EvalReport {
        run_id: l.run_id.clone(),
        split: opts.split,
        iteration: l.ckpt.iteration,
        accuracy,
    };
    fs::create_dir_all(&l.out_dir).map_err(Error::io(&l.out_dir))?;
    let path = l.out_dir.join(format!("{}.eval.{}.json", l.run_id, opts.split));
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(Error::io(&path))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Gradnorm,
    Cka,
    Landscape,
    Embeddings,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Gradnorm => "gradnorm",
            Metric::Cka => "cka",
            Metric::Landscape => "landscape",
            Metric::Embeddings => "embeddings",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradnorm" => Ok(Metric::Gradnorm),
            "cka" => Ok(Metric::Cka),
            "landscape" => Ok(Metric::Landscape),
            "embeddings" => Ok(Metric::Embeddings),
            _ => Err(Error::config(
                "metric",
                format!("unknown metric `{s}` (gradnorm | cka | landscape | embeddings)"),
            )),
        }
    }
}

/// Writes the CSVs of one analysis and returns their paths.
///
/// `gradnorm` and `landscape` group the `n_tasks` episodes into batches of
/// the configured size (one CSV row per batch); `cka` reports every layer;
/// `embeddings` exports one episode before and after adaptation.
pub fn cmd_analyze(checkpoint: &Path, metric: Metric, opts: &EvalOptions) -> Result<Vec<PathBuf>> {
    if opts.n_tasks == 0 {
        return Err(Error::InvalidInput(format!("{metric} analysis needs at least one episode")));
    }
    let l = load_for(checkpoint, opts)?;
    let c = &l.ckpt.config;
    let meta = &l.ckpt.meta;
    let kind = meta.kind();
    let mut stream = episode_stream(&l.source, opts.split, &c.episode, l.seed, "analyze-episodes");
    let mut batches = |n_tasks: usize| -> Result<Vec<Vec<Episode>>> {
        let b = c.batch_size();
        let n = n_tasks.div_ceil(b);
        (0..n)
            .map(|i| stream.by_ref().take(b.min(n_tasks - i * b)).collect::<Result<Vec<_>>>())
            .collect()
    };
    fs::create_dir_all(&l.out_dir).map_err(Error::io(&l.out_dir))?;
    let file = |name: &str| l.out_dir.join(format!("{}.{name}.csv", l.run_id));
    let inner = crate::meta::InnerLoopConfig {
        second_order: false,
        ..c.inner.clone()
    };
    match metric {
        Metric::Gradnorm => {
            let mut rows = Vec::new();
            for (i, batch) in batches(opts.n_tasks)?.iter().enumerate() {
                let results = batch
                    .iter()
                    .map(|e| crate::meta::adapt_with(meta, kind, e, &inner, false))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(layer_grad_norms(i as u64, &results)?);
            }
            let p = file("gradnorm");
            write_csv(&p, &rows)?;
            Ok(vec![p])
        }
        Metric::Cka => {
            let rows = cka_all_layers(meta, kind, stream.take(opts.n_tasks), &c.inner)?;
            let p = file("cka");
            write_csv(&p, &rows)?;
            Ok(vec![p])
        }
        Metric::Landscape => {
            let mut rows = Vec::new();
            let mut sweep = Vec::new();
            for (i, batch) in batches(opts.n_tasks)?.iter().enumerate() {
                let (rec, sw) = landscape_metrics(meta, kind, batch, &c.inner, i as u64)?;
                sweep.extend(sw.rows(i as u64));
                rows.push(rec);
            }
            let (p, q) = (file("landscape"), file("landscape_sweep"));
            write_csv(&p, &rows)?;
            write_csv(&q, &sweep)?;
            Ok(vec![p, q])
        }
        Metric::Embeddings => {
            let episode = stream.next().expect("stream is infinite")?;
            let mut rows = export_embeddings(meta, &episode, &c.inner, Stage::Before)?;
            rows.extend(export_embeddings(meta, &episode, &c.inner, Stage::After)?);
            let p = file("embeddings");
            write_embeddings_csv(&p, &rows)?;
            Ok(vec![p])
        }
    }
}
