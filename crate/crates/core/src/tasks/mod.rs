//! Episodic task distribution: class pools split into train/val/test, and
//! N-way K-shot episode sampling over synthetic or on-disk images.

mod cache;
mod directory;
mod synthetic;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::Array;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{read_episode_cache, write_episode_cache, CacheHeader};
pub use directory::{load_directory_dataset, read_image, write_pgm};
pub use synthetic::{generate_synthetic_class, Family, SyntheticClassSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("unknown split `{s}` (train | val | test)"))),
        }
    }
}

/// A sample's identity: global class id and index within that class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub class: usize,
    pub index: usize,
}

/// Images `[n, c, h, w]` with episode-local labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Array,
    pub labels: Vec<usize>,
    pub ids: Vec<SampleId>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One N-way K-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: LabeledSet,
    pub query: LabeledSet,
    /// `classes[label]` is the original class id behind episode label `label`.
    pub classes: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug)]
enum Images {
    Synthetic {
        family: Family,
        seed: u64,
        noise: f64,
        samples_per_class: usize,
    },
    /// Decoded images per global class id, each `[c, h, w]`.
    Stored(Arc<Vec<Vec<Array>>>),
}

/// A task distribution: disjoint class pools per split and a way to
/// produce each class's samples.
#[derive(Clone, Debug)]
pub struct TaskSource {
    images: Images,
    pools: [Vec<usize>; 3],
    channels: usize,
    image_size: usize,
    /// Class names for directory datasets, indexed by class id.
    pub class_names: Vec<String>,
}

/// Settings for a synthetic task source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub family: Family,
    pub seed: u64,
    pub noise: f64,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            family: Family::Pattern,
            seed: 0,
            noise: 0.75,
            image_size: 32,
            samples_per_class: 600,
            train_classes: 64,
            val_classes: 16,
            test_classes: 20,
        }
    }
}

impl TaskSource {
    /// Classes `0..train`, then the validation and test ranges.
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.samples_per_class == 0 {
            return Err(Error::config("tasks.samples_per_class", "must be positive"));
        }
        if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
            return Err(Error::config("tasks.noise", "must be finite and >= 0"));
        }
        if cfg.image_size == 0 {
            return Err(Error::config("tasks.image_size", "must be positive"));
        }
        let a = cfg.train_classes;
        let b = a + cfg.val_classes;
        let c = b + cfg.test_classes;
        Ok(Self {
            images: Images::Synthetic {
                family: cfg.family,
                seed: cfg.seed,
                noise: cfg.noise,
                samples_per_class: cfg.samples_per_class,
            },
            pools: [(0..a).collect(), (a..b).collect(), (b..c).collect()],
            channels: 1,
            image_size: cfg.image_size,
            class_names: Vec::new(),
        })
    }

    pub(crate) fn stored(images: Vec<Vec<Array>>, pools: [Vec<usize>; 3], channels: usize, image_size: usize, names: Vec<String>) -> Self {
        Self {
            images: Images::Stored(Arc::new(images)),
            pools,
            channels,
            image_size,
            class_names: names,
        }
    }

    pub fn classes(&self, split: Split) -> &[usize] {
        &self.pools[split.index()]
    }

    /// `(channels, height, width)` of every image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.channels, self.image_size, self.image_size)
    }

    pub fn samples_in_class(&self, class: usize) -> usize {
        match &self.images {
            Images::Synthetic { samples_per_class, .. } => *samples_per_class,
            Images::Stored(data) => data.get(class).map_or(0, Vec::len),
        }
    }

    /// Pixels of sample `index` of `class`, flattened `[c, h, w]`.
    pub fn sample_pixels(&self, id: SampleId) -> Result<Vec<f64>> {
        if id.index >= self.samples_in_class(id.class) {
            return Err(Error::InvalidInput(format!("no sample {} in class {}", id.index, id.class)));
        }
        match &self.images {
            Images::Synthetic { family, seed, noise, .. } => {
                let spec = SyntheticClassSpec::new(*family, id.class, *seed, *noise, self.image_size);
                Ok(spec.sample(id.index as u64))
            }
            Images::Stored(data) => Ok(data[id.class][id.index].data().to_vec()),
        }
    }

    /// Stacks the given samples into `[n, c, h, w]`.
    pub fn images(&self, ids: &[SampleId]) -> Result<Array> {
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(ids.len() * c * h * w);
        for &id in ids {
            data.extend(self.sample_pixels(id)?);
        }
        Ok(Array::new(vec![ids.len(), c, h, w], data)?)
    }

    /// Panics if any class id appears in two splits.
    pub fn assert_disjoint(&self) {
        let mut seen = std::collections::HashSet::new();
        for pool in &self.pools {
            for &c in pool {
                assert!(seen.insert(c), "class {c} appears in more than one split");
            }
        }
    }
}

/// Samples an N-way episode: `n_way` distinct classes from `split`, and for
/// each `k_shot` support plus `n_query` query samples drawn without
/// replacement. The order in which classes are drawn is the label
/// permutation, so it is fresh and uniform for every episode.
pub fn sample_episode(
    source: &TaskSource,
    split: Split,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(Error::InvalidInput("episodes need n_way, k_shot and n_query >= 1".into()));
    }
    let pool = source.classes(split);
    if pool.len() < n_way {
        return Err(Error::InsufficientClasses {
            split: split.to_string(),
            available: pool.len(),
            requested: n_way,
        });
    }
    let classes: Vec<usize> = sample(rng, pool.len(), n_way).into_iter().map(|i| pool[i]).collect();
    let per_class = k_shot + n_query;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * n_query);
    for &class in &classes {
        let available = source.samples_in_class(class);
        if available < per_class {
            return Err(Error::InsufficientSamples {
                class,
                available,
                requested: per_class,
            });
        }
        let picks = sample(rng, available, per_class).into_vec();
        support.extend(picks[..k_shot].iter().map(|&index| SampleId { class, index }));
        query.extend(picks[k_shot..].iter().map(|&index| SampleId { class, index }));
    }
    let label_of = |ids: &[SampleId], per: usize| -> Vec<usize> { (0..ids.len()).map(|i| i / per).collect() };
    Ok(Episode {
        support: LabeledSet {
            images: source.images(&support)?,
            labels: label_of(&support, k_shot),
            ids: support,
        },
        query: LabeledSet {
            images: source.images(&query)?,
            labels: label_of(&query, n_query),
            ids: query,
        },
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn source() -> TaskSource {
        TaskSource::synthetic(&SyntheticConfig {
            samples_per_class: 40,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn episode_sizes() {
        let src = source();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&src, Split::Train, 5, 5, 15, &mut rng).unwrap();
        assert_eq!(e.support.len(), 25);
        assert_eq!(e.query.len(), 75);
        assert_eq!(e.support.images.shape(), [25, 1, 32, 32]);
        let e = sample_episode(&src, Split::Train, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(e.support.len(), 5);
    }

    #[test]
    fn insufficient_classes_and_samples() {
        let src = source();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_episode(&src, Split::Val, 17, 1, 1, &mut rng),
            Err(Error::InsufficientClasses { available: 16, .. })
        ));
        assert!(matches!(
            sample_episode(&src, Split::Val, 5, 30, 15, &mut rng),
            Err(Error::InsufficientSamples { available: 40, .. })
        ));
    }

    #[test]
    fn default_splits_are_disjoint() {
        let src = source();
        src.assert_disjoint();
        assert_eq!(src.classes(Split::Train).len(), 64);
        assert_eq!(src.classes(Split::Val).len(), 16);
        assert_eq!(src.classes(Split::Test).len(), 20);
    }
}
