use thiserror::Error;

/// Errors raised by tensor operations and gradient computation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("batchnorm: batch of size {0} has degenerate variance (need at least 2)")]
    DegenerateBatch(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: loss is not recorded on this graph")]
    DetachedLoss,

    #[error("tensors recorded on different graphs were combined")]
    GraphMismatch,

    #[error("tensor refers to a cleared graph generation")]
    StaleTensor,
}

pub type Result<T> = std::result::Result<T, AdError>;
