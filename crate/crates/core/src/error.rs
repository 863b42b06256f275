use std::path::PathBuf;

use crate::autodiff::AdError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),

    #[error("spatial dims {height}x{width} are too small for four 2x2 poolings (need at least 16)")]
    SpatialDims { height: usize, width: usize },

    #[error("layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("backbone layer {0} has zero norm; it cannot be normalized")]
    ZeroNormLayer(usize),

    #[error("context parameters are not on the graph (run igs before update_context)")]
    ContextDetached,

    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("split `{split}` has {available} classes, {requested} requested")]
    InsufficientClasses { split: String, available: usize, requested: usize },

    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientSamples { class: usize, available: usize, requested: usize },

    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("episode cache: {0}")]
    EpisodeCache(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
