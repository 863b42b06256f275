//! Diagnostics over adaptation runs: per-layer gradient norms, linear CKA of
//! features before and after adaptation, embedding export and landscape
//! sweeps. Every record type serializes to CSV.

mod cka;
mod landscape;

use std::fs;
use std::path::Path;

use crate::autodiff::{Array, Graph, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use cka::linear_cka;
pub use landscape::{landscape_sweep, sweep_rates, LandscapeRecord, LandscapeSweep, StepPoint, SweepRow, SWEEP_POINTS};

use crate::error::{Error, Result};
use crate::meta::{adapt_with, support_loss, AdaptResult, InnerLoopConfig, LearnerKind, MeanCi, MetaKnowledge};
use crate::nn::{backbone_forward, Theta, NUM_LAYERS};
use crate::tasks::{Episode, LabeledSet};

/// Support-gradient norms averaged over every step of every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormRecord {
    pub iteration: u64,
    pub layer1: f64,
    pub layer2: f64,
    pub layer3: f64,
    pub layer4: f64,
    pub classifier: f64,
    pub n_steps: usize,
    pub n_tasks: usize,
}

impl GradNormRecord {
    pub fn norms(&self) -> [f64; NUM_LAYERS + 1] {
        [self.layer1, self.layer2, self.layer3, self.layer4, self.classifier]
    }

    /// Share of the last backbone layer in the summed norms.
    pub fn top_layer_share(&self) -> f64 {
        let n = self.norms();
        n[NUM_LAYERS - 1] / n.iter().sum::<f64>()
    }
}

pub fn layer_grad_norms(iteration: u64, batch: &[AdaptResult]) -> Result<GradNormRecord> {
    let rows: Vec<&Vec<f64>> = batch.iter().flat_map(|r| &r.grad_norms).collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("no adaptation steps to average".into()));
    }
    let mut mean = [0.0; NUM_LAYERS + 1];
    for r in &rows {
        if r.len() != mean.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} norms per step, got {}",
                mean.len(),
                r.len()
            )));
        }
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    let [layer1, layer2, layer3, layer4, classifier] = mean.map(|m| m / n);
    Ok(GradNormRecord {
        iteration,
        layer1,
        layer2,
        layer3,
        layer4,
        classifier,
        n_steps: batch.first().map_or(0, |r| r.grad_norms.len()),
        n_tasks: batch.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaRecord {
    pub layer: usize,
    pub cka_mean: f64,
    pub ci95: f64,
    pub n_tasks: usize,
}

/// Block outputs of `theta` on `set`, each flattened to `[n, features]`.
pub fn block_features(theta: &Theta<Array>, set: &LabeledSet) -> Result<Vec<Array>> {
    let out = backbone_forward(&theta.constants().backbone, &Tensor::constant(set.images.clone()), true)?;
    out.activations
        .iter()
        .map(|a| {
            let n = a.shape()[0];
            Ok(a.value().reshaped(&[n, a.value().len() / n])?)
        })
        .collect()
}

/// CKA between query-set block outputs before and after adaptation, for
/// every backbone layer, as mean ± CI over the episodes.
pub fn cka_all_layers<I>(meta: &MetaKnowledge, kind: LearnerKind, episodes: I, cfg: &InnerLoopConfig) -> Result<Vec<CkaRecord>>
where
    I: IntoIterator<Item = Result<Episode>>,
{
    let cfg = InnerLoopConfig {
        second_order: false,
        ..cfg.clone()
    };
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); NUM_LAYERS];
    for episode in episodes {
        let episode = episode?;
        let before = block_features(&meta.theta, &episode.query)?;
        let adapted = adapt_with(meta, kind, &episode, &cfg, false)?;
        let after = block_features(&adapted.theta, &episode.query)?;
        for (l, (b, a)) in before.iter().zip(&after).enumerate() {
            per_layer[l].push(linear_cka(b, a)?);
        }
    }
    if per_layer[0].is_empty() {
        return Err(Error::InvalidInput("CKA needs at least one episode".into()));
    }
    Ok(per_layer
        .iter()
        .enumerate()
        .map(|(l, v)| {
            let s = MeanCi::of(v);
            CkaRecord {
                layer: l + 1,
                cka_mean: s.mean,
                ci95: s.ci95,
                n_tasks: s.n,
            }
        })
        .collect())
}

/// [`cka_all_layers`] restricted to one layer (1-based).
pub fn cka_before_after<I>(meta: &MetaKnowledge, kind: LearnerKind, episodes: I, cfg: &InnerLoopConfig, layer: usize) -> Result<CkaRecord>
where
    I: IntoIterator<Item = Result<Episode>>,
{
    if layer == 0 || layer > NUM_LAYERS {
        return Err(Error::LayerOutOfRange { layer, layers: NUM_LAYERS });
    }
    Ok(cka_all_layers(meta, kind, episodes, cfg)?.swap_remove(layer - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Before,
    After,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub set: &'static str,
    pub class: usize,
    pub label: usize,
    pub stage: Stage,
    pub features: Vec<f64>,
}

/// Last-block features of every support then query sample, before or after
/// adapting to `episode`.
pub fn export_embeddings(meta: &MetaKnowledge, episode: &Episode, cfg: &InnerLoopConfig, stage: Stage) -> Result<Vec<EmbeddingRow>> {
    let theta = match stage {
        Stage::Before => meta.theta.clone(),
        Stage::After => {
            let cfg = InnerLoopConfig {
                second_order: false,
                ..cfg.clone()
            };
            adapt_with(meta, meta.kind(), episode, &cfg, false)?.theta
        }
    };
    let mut rows = Vec::with_capacity(episode.support.len() + episode.query.len());
    for (name, set) in [("support", &episode.support), ("query", &episode.query)] {
        let feats = block_features(&theta, set)?.pop().expect("four blocks");
        let d = feats.shape()[1];
        for (i, id) in set.ids.iter().enumerate() {
            rows.push(EmbeddingRow {
                sample_id: format!("{}:{}", id.class, id.index),
                set: name,
                class: id.class,
                label: set.labels[i],
                stage,
                features: feats.data()[i * d..(i + 1) * d].to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Header `sample_id,set,class,label,stage,f0,f1,...`.
pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "sample_id".to_string(),
        "set".into(),
        "class".into(),
        "label".into(),
        "stage".into(),
    ];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for r in rows {
        let stage = match r.stage {
            Stage::Before => "before",
            Stage::After => "after",
        };
        let mut rec = vec![
            r.sample_id.clone(),
            r.set.to_string(),
            r.class.to_string(),
            r.label.to_string(),
            stage.into(),
        ];
        rec.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Landscape sweep over one batch: adapt each episode while recording the
/// inner-loop points, then probe each step's gradient direction on that
/// episode's support set.
pub fn landscape_metrics(
    meta: &MetaKnowledge,
    kind: LearnerKind,
    batch: &[Episode],
    cfg: &InnerLoopConfig,
    iteration: u64,
) -> Result<(LandscapeRecord, LandscapeSweep)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("landscape metrics need a non-empty batch".into()));
    }
    let cfg = InnerLoopConfig {
        second_order: false,
        ..cfg.clone()
    };
    let template = &meta.theta;
    let mut points = Vec::new();
    for (task, episode) in batch.iter().enumerate() {
        let r = adapt_with(meta, kind, episode, &cfg, true)?;
        for (p, g) in r.step_points.iter().zip(&r.step_grads) {
            points.push(StepPoint {
                task,
                params: p.params().into_iter().cloned().collect(),
                grad: g.params().into_iter().cloned().collect(),
            });
        }
    }
    landscape_sweep(iteration, &points, cfg.alpha, |task, params| {
        let graph = Graph::new();
        let theta = template.with_values(params.iter().map(|a| graph.leaf(a.clone())).collect())?;
        let loss = support_loss(&theta, &batch[task].support)?;
        let leaves = theta.params();
        let grads = graph
            .grad(&loss, &leaves, false)?
            .into_iter()
            .zip(&leaves)
            .map(|(g, t)| g.map_or_else(|| Array::zeros(t.shape()), |g| g.value().clone()))
            .collect();
        Ok((loss.item(), grads))
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
