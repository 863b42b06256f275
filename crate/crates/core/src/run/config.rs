use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{InnerLoopConfig, LearnerKind};
use crate::nn::ModelConfig;
use crate::tasks::{load_directory_dataset, Family, SyntheticConfig, TaskSource};

/// Environment variable that overrides the output root.
pub const OUTPUT_ROOT_ENV: &str = "CXGRAD_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub source: SourceKind,
    /// Dataset root for `source = "directory"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub family: Family,
    /// Seed of the synthetic classes; independent of the run seed so runs
    /// with different seeds see the same classes.
    pub data_seed: u64,
    pub noise: f64,
    pub samples_per_class: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            source: SourceKind::Synthetic,
            path: None,
            family: s.family,
            data_seed: s.seed,
            noise: s.noise,
            samples_per_class: s.samples_per_class,
            train_classes: s.train_classes,
            val_classes: s.val_classes,
            test_classes: s.test_classes,
        }
    }
}

impl TaskConfig {
    pub fn build(&self, model: &ModelConfig) -> Result<TaskSource> {
        match self.source {
            SourceKind::Synthetic => {
                if model.in_channels != 1 {
                    return Err(Error::config("model.in_channels", "synthetic tasks are grayscale (1 channel)"));
                }
                TaskSource::synthetic(&SyntheticConfig {
                    family: self.family,
                    seed: self.data_seed,
                    noise: self.noise,
                    image_size: model.image_size,
                    samples_per_class: self.samples_per_class,
                    train_classes: self.train_classes,
                    val_classes: self.val_classes,
                    test_classes: self.test_classes,
                })
            }
            SourceKind::Directory => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::config("tasks.path", "required for directory datasets"))?;
                load_directory_dataset(path, model.in_channels, model.image_size)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Defaults to `{learner}-s{seed}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub learner: LearnerKind,
    pub seed: u64,
    pub iterations: u64,
    /// Tasks per outer step; defaults to 4 for 1-shot and 2 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub output_dir: PathBuf,
    /// Worker threads for per-episode adaptation.
    pub workers: usize,
    /// Validate every this many iterations (0 = only at the end).
    pub val_every: u64,
    pub val_tasks: usize,
    /// Stop once validation accuracy reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_accuracy: Option<f64>,
    /// Log landscape metrics every this many iterations (0 = off).
    pub landscape_every: u64,
    /// Rescale initial conv weights to unit norm.
    pub unit_norm_init: bool,
    pub episode: EpisodeConfig,
    pub inner: InnerLoopConfig,
    pub model: ModelConfig,
    pub tasks: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            learner: LearnerKind::Cxgrad,
            seed: 0,
            iterations: 2000,
            batch_size: None,
            output_dir: PathBuf::from("runs"),
            workers: 1,
            val_every: 100,
            val_tasks: 100,
            early_stop_accuracy: None,
            landscape_every: 0,
            unit_norm_init: false,
            episode: EpisodeConfig::default(),
            inner: InnerLoopConfig::default(),
            model: ModelConfig::default(),
            tasks: TaskConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Width-16 backbone, 32×32 synthetic tasks, 2,000 iterations.
    Desk,
    /// Width-64 backbone, 84×84 images, 50,000 iterations.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::config("preset", format!("unknown preset `{s}` (desk | full)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::default(),
            Preset::Full => Self {
                iterations: 50_000,
                val_every: 500,
                val_tasks: 600,
                model: ModelConfig {
                    width: 64,
                    image_size: 84,
                    ..ModelConfig::default()
                },
                ..Self::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("{}-s{}", self.learner, self.seed))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.episode.k_shot == 1 { 4 } else { 2 })
    }

    /// `output_dir/run_id`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    /// Applies the output-root environment override, if set.
    pub fn with_env_output_root(mut self) -> Self {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                self.output_dir = PathBuf::from(root);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("inner.{field}"),
                reason,
            },
            e => e,
        })?;
        self.model.validate()?;
        let ep = &self.episode;
        for (field, v) in [
            ("episode.n_way", ep.n_way),
            ("episode.k_shot", ep.k_shot),
            ("episode.n_query", ep.n_query),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if ep.n_way != self.model.n_way {
            return Err(Error::config(
                "model.n_way",
                format!("must equal episode.n_way ({} != {})", self.model.n_way, ep.n_way),
            ));
        }
        if ep.n_way * ep.k_shot < 2 {
            return Err(Error::config(
                "episode",
                "support set needs at least 2 samples for batch statistics",
            ));
        }
        if self.batch_size() == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.val_tasks == 0 {
            return Err(Error::config("val_tasks", "must be at least 1"));
        }
        if let Some(a) = self.early_stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("early_stop_accuracy", "must lie in [0, 1]"));
            }
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::config("run_id", "must be a plain, non-empty file name"));
            }
        }
        let t = &self.tasks;
        if t.source == SourceKind::Synthetic {
            if t.samples_per_class < ep.k_shot + ep.n_query {
                return Err(Error::config("tasks.samples_per_class", "must be at least k_shot + n_query"));
            }
            for (field, v) in [("tasks.train_classes", t.train_classes), ("tasks.val_classes", t.val_classes)] {
                if v < ep.n_way {
                    return Err(Error::config(field, format!("must be at least n_way ({})", ep.n_way)));
                }
            }
            if !(t.noise.is_finite() && t.noise >= 0.0) {
                return Err(Error::config("tasks.noise", "must be finite and >= 0"));
            }
        } else if t.path.is_none() {
            return Err(Error::config("tasks.path", "required for directory datasets"));
        }
        Ok(())
    }
}
