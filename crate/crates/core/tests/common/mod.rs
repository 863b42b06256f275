#![allow(dead_code)]

use cxgrad::autodiff::Array;
use cxgrad::meta::{LearnerKind, MetaKnowledge};
use cxgrad::nn::ModelConfig;
use cxgrad::tasks::{sample_episode, Episode, Split, SyntheticConfig, TaskSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Width-4 backbone on 16×16 inputs, 3-way.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        width: 4,
        image_size: 16,
        n_way: 3,
        context_dim: 8,
        hidden_dim: 6,
        ..ModelConfig::default()
    }
}

pub fn tiny_source() -> TaskSource {
    TaskSource::synthetic(&SyntheticConfig {
        image_size: 16,
        samples_per_class: 12,
        train_classes: 6,
        val_classes: 4,
        test_classes: 4,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

pub fn tiny_episode(seed: u64) -> Episode {
    sample_episode(&tiny_source(), Split::Train, 3, 2, 3, &mut rng(seed)).unwrap()
}

pub fn tiny_meta(kind: LearnerKind, seed: u64) -> MetaKnowledge {
    MetaKnowledge::init(kind, &tiny_model(), &mut rng(seed))
}

/// Replaces the sub-network's zero output layer with random weights so γ
/// depends on ν.
pub fn randomize_phi(meta: &mut MetaKnowledge, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let phi = meta.phi.as_mut().expect("cxgrad meta");
    let data = (0..phi.w2.len()).map(|_| r.random_range(-scale..scale)).collect();
    phi.w2 = Array::new(phi.w2.shape().to_vec(), data).unwrap();
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
