//! Composite ops built from the recorded primitives. Because they are pure
//! compositions, their gradients (and gradients of gradients) come for free.

use crate::autodiff::error::{AdError, Result};
use crate::autodiff::tensor::Tensor;

/// Shape of the per-feature statistics of a `[batch, features, ...]` tensor:
/// `[1, features, 1, ...]`.
fn stat_shape(x: &Tensor) -> Result<Vec<usize>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(AdError::InvalidShape {
            op: "batchnorm",
            shape: s.to_vec(),
            reason: "expected (batch, features, ...)".into(),
        });
    }
    let mut out = vec![1; s.len()];
    out[1] = s[1];
    Ok(out)
}

/// Per-feature mean over every axis except axis 1, kept broadcastable.
pub fn feature_mean(x: &Tensor) -> Result<Tensor> {
    let shape = stat_shape(x)?;
    let count = x.value().len() / shape[1];
    x.sum_to(&shape)?.scale(1.0 / count as f64)
}

/// Per-feature biased variance over every axis except axis 1.
pub fn feature_variance(x: &Tensor) -> Result<Tensor> {
    let shape = stat_shape(x)?;
    let centered = x.add_bcast(&feature_mean(x)?.scale(-1.0)?)?;
    let count = x.value().len() / shape[1];
    centered.mul_sum_to(&centered, &shape)?.scale(1.0 / count as f64)
}

/// Batch normalization with batch statistics:
/// `γ · (x − mean) / sqrt(var + ε) + β`, statistics per feature (axis 1).
///
/// `gamma` and `beta` have shape `[features]`. The batch axis must hold at
/// least two samples.
pub fn batchnorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = stat_shape(x)?;
    if x.shape()[0] < 2 {
        return Err(AdError::DegenerateBatch(x.shape()[0]));
    }
    let c = shape[1];
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(AdError::ShapeMismatch {
                op: "batchnorm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let n = (x.value().len() / c) as f64;
    let mean = feature_mean(x)?;
    let centered = x.add_bcast(&mean.scale(-1.0)?)?;
    let var = centered.mul_sum_to(&centered, &shape)?.scale(1.0 / n)?;
    let inv_std = var.add_scalar(eps)?.powf(-0.5)?;
    let gain = inv_std.mul(&gamma.reshape(&shape)?)?;
    centered.affine_bcast(&gain, &beta.reshape(&shape)?)
}

/// Euclidean (Frobenius) norm of every element, as a scalar.
pub fn l2_norm(x: &Tensor) -> Result<Tensor> {
    let ones = vec![1; x.shape().len()];
    x.mul_sum_to(x, &ones)?.reshape(&[])?.sqrt()
}

/// Multiplies every element of `x` by the one-element tensor `s`.
pub fn scale_by(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    if s.value().len() != 1 {
        return Err(AdError::ShapeMismatch {
            op: "scale_by",
            lhs: x.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let ones = vec![1; x.shape().len()];
    x.mul_bcast(&s.reshape(&ones)?)
}

/// Affine map `x · Wᵀ + b` with `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let y = x.matmul(&weight.transpose()?)?;
    let out = weight.shape()[0];
    if bias.shape() != [out] {
        return Err(AdError::ShapeMismatch {
            op: "linear",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    y.add_bcast(&bias.reshape(&[1, out])?)
}

/// Mean softmax cross-entropy of `logits: [batch, classes]` against integer
/// labels.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, n) = match logits.shape() {
        &[b, n] => (b, n),
        s => {
            return Err(AdError::InvalidShape {
                op: "softmax_cross_entropy",
                shape: s.to_vec(),
                reason: "expected (batch, classes) logits".into(),
            })
        }
    };
    if labels.len() != b {
        return Err(AdError::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(AdError::LabelOutOfRange { label, classes: n });
    }
    let picked = logits.gather(labels.iter().enumerate().map(|(i, &l)| i * n + l).collect(), &[b])?;
    let lse = logits.logsumexp_rows()?.reshape(&[b])?;
    lse.sub(&picked)?.mean()
}

/// Index of the largest entry per row; the lowest index wins exact ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (b, n) = (s[0], s[1]);
    let d = logits.data();
    (0..b)
        .map(|i| {
            let row = &d[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
