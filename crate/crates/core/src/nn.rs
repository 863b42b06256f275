//! Conv-4 backbone, linear classifier, the scaling sub-network and the
//! per-task context vector.
//!
//! Parameter containers are generic over their leaf type: `Array` for stored
//! meta-knowledge, `Tensor` for values that live on a graph during one
//! adaptation.

use crate::autodiff::functional::{batchnorm, linear};
use crate::autodiff::{Array, Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of scalable conv layers.
pub const NUM_LAYERS: usize = 4;

/// Softplus preimage of 1: the sub-network outputs γ = 1 at initialization.
pub const IDENTITY_BIAS: f64 = 0.541_324_854_612_918_1;

/// Read access to the numeric value of a parameter leaf.
pub trait HasValue {
    fn array(&self) -> &Array;
}

impl HasValue for Array {
    fn array(&self) -> &Array {
        self
    }
}

impl HasValue for Tensor {
    fn array(&self) -> &Array {
        self.value()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
    pub image_size: usize,
    pub n_way: usize,
    pub context_dim: usize,
    pub hidden_dim: usize,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 16,
            image_size: 32,
            n_way: 5,
            context_dim: 100,
            hidden_dim: 100,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Width times the spatial size left after four floor-halvings.
    pub fn feature_dim(&self) -> usize {
        let s = self.image_size / 16;
        self.width * s * s
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.in_channels", self.in_channels),
            ("model.width", self.width),
            ("model.n_way", self.n_way),
            ("model.context_dim", self.context_dim),
            ("model.hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.image_size < 16 {
            return Err(Error::config("model.image_size", "must be at least 16"));
        }
        if !(self.bn_eps >= 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::config("model.bn_eps", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    /// `[out, in, 3, 3]`, no bias.
    pub weight: T,
    pub bn_gamma: T,
    pub bn_beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub bn_eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    /// `[n_way, feature_dim]`
    pub weight: T,
    pub bias: T,
}

/// `γ = softplus(W2 · relu(W1 · ν + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNetwork<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Task-learner parameters: backbone ω and classifier ψ.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta<T> {
    pub backbone: Backbone<T>,
    pub classifier: Classifier<T>,
}

impl<T> ConvBlock<T> {
    fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<ConvBlock<U>, E> {
        Ok(ConvBlock {
            weight: f(&self.weight)?,
            bn_gamma: f(&self.bn_gamma)?,
            bn_beta: f(&self.bn_beta)?,
        })
    }
}

impl<T> Backbone<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("backbone.block{}", i + 1);
            out.push((format!("{p}.weight"), &b.weight));
            out.push((format!("{p}.bn_gamma"), &b.bn_gamma));
            out.push((format!("{p}.bn_beta"), &b.bn_beta));
        }
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<Backbone<U>, E> {
        Ok(Backbone {
            blocks: self.blocks.iter().map(|b| b.try_map(&mut f)).collect::<Result<_, E>>()?,
            bn_eps: self.bn_eps,
        })
    }
}

impl<T> Classifier<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        vec![("classifier.weight".into(), &self.weight), ("classifier.bias".into(), &self.bias)]
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<Classifier<U>, E> {
        Ok(Classifier {
            weight: f(&self.weight)?,
            bias: f(&self.bias)?,
        })
    }
}

impl<T> SubNetwork<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        vec![
            ("subnet.w1".into(), &self.w1),
            ("subnet.b1".into(), &self.b1),
            ("subnet.w2".into(), &self.w2),
            ("subnet.b2".into(), &self.b2),
        ]
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<SubNetwork<U>, E> {
        Ok(SubNetwork {
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SubNetwork<U> {
        self.try_map(|t| Ok::<_, std::convert::Infallible>(f(t))).unwrap()
    }

    pub fn params(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds the same structure from values in [`SubNetwork::named`] order.
    pub fn with_values<U>(&self, values: Vec<U>) -> Result<SubNetwork<U>> {
        refill(self.params().len(), values, |it| self.try_map(|_| it.next().ok_or(())))
    }
}

impl<T> Theta<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = self.backbone.named();
        out.extend(self.classifier.named());
        out
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<Theta<U>, E> {
        Ok(Theta {
            backbone: self.backbone.try_map(&mut f)?,
            classifier: self.classifier.try_map(&mut f)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Theta<U> {
        self.try_map(|t| Ok::<_, std::convert::Infallible>(f(t))).unwrap()
    }

    pub fn params(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds the same structure from values in [`Theta::named`] order.
    pub fn with_values<U>(&self, values: Vec<U>) -> Result<Theta<U>> {
        refill(self.params().len(), values, |it| self.try_map(|_| it.next().ok_or(())))
    }
}

fn refill<U, S>(expected: usize, values: Vec<U>, build: impl FnOnce(&mut std::vec::IntoIter<U>) -> Result<S, ()>) -> Result<S> {
    if values.len() != expected {
        return Err(Error::InvalidInput(format!(
            "expected {expected} parameter tensors, got {}",
            values.len()
        )));
    }
    let mut it = values.into_iter();
    build(&mut it).map_err(|_| Error::InvalidInput("parameter count mismatch".into()))
}

impl Theta<Array> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(NUM_LAYERS);
        let mut cin = cfg.in_channels;
        for _ in 0..NUM_LAYERS {
            blocks.push(ConvBlock {
                weight: uniform(&[cfg.width, cin, 3, 3], (6.0 / (cin * 9) as f64).sqrt(), rng),
                bn_gamma: Array::ones(&[cfg.width]),
                bn_beta: Array::zeros(&[cfg.width]),
            });
            cin = cfg.width;
        }
        let d = cfg.feature_dim();
        Theta {
            backbone: Backbone {
                blocks,
                bn_eps: cfg.bn_eps,
            },
            classifier: Classifier {
                weight: uniform(&[cfg.n_way, d], (6.0 / d as f64).sqrt(), rng),
                bias: Array::zeros(&[cfg.n_way]),
            },
        }
    }

    /// Attaches every parameter to `graph` as a fresh leaf.
    pub fn leaves(&self, graph: &Graph) -> Theta<Tensor> {
        self.map(|a| graph.leaf(a.clone()))
    }

    pub fn constants(&self) -> Theta<Tensor> {
        self.map(|a| Tensor::constant(a.clone()))
    }

    /// Rescales every conv weight to unit Frobenius norm.
    pub fn unit_normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for (l, b) in out.backbone.blocks.iter_mut().enumerate() {
            let n = b.weight.norm();
            if n == 0.0 {
                return Err(Error::ZeroNormLayer(l + 1));
            }
            b.weight = b.weight.map(|w| w / n);
        }
        Ok(out)
    }
}

impl Theta<Tensor> {
    pub fn values(&self) -> Theta<Array> {
        self.map(|t| t.value().clone())
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let out = backbone_forward(&self.backbone, images, false)?;
        classifier_forward(&self.classifier, &out.features)
    }
}

impl SubNetwork<Array> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cfg.context_dim as f64).sqrt();
        SubNetwork {
            w1: uniform(&[cfg.hidden_dim, cfg.context_dim], bound, rng),
            b1: uniform(&[cfg.hidden_dim], bound, rng),
            w2: Array::zeros(&[NUM_LAYERS, cfg.hidden_dim]),
            b2: Array::full(&[NUM_LAYERS], IDENTITY_BIAS),
        }
    }

    pub fn leaves(&self, graph: &Graph) -> SubNetwork<Tensor> {
        self.map(|a| graph.leaf(a.clone()))
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}

/// Output of [`backbone_forward`].
pub struct BackboneOutput {
    /// `[batch, feature_dim]`
    pub features: Tensor,
    /// Per-block outputs, kept only when requested.
    pub activations: Vec<Tensor>,
}

/// conv → batchnorm (batch statistics) → relu → 2×2 max-pool.
pub fn block_forward(block: &ConvBlock<Tensor>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let z = x.conv2d(&block.weight)?;
    let y = batchnorm(&z, &block.bn_gamma, &block.bn_beta, eps)?;
    Ok(y.relu()?.maxpool2d()?)
}

/// Runs the four conv blocks over `images: [batch, channels, h, w]` and
/// flattens the result. Pooling floors odd sizes, so `h` and `w` need at
/// least four halvings (≥ 16).
pub fn backbone_forward(backbone: &Backbone<Tensor>, images: &Tensor, keep_activations: bool) -> Result<BackboneOutput> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::InvalidInput(format!("images must be [batch, channels, h, w], got {s:?}")));
    }
    if s[2] < 16 || s[3] < 16 {
        return Err(Error::SpatialDims { height: s[2], width: s[3] });
    }
    let batch = s[0];
    let mut x = images.clone();
    let mut activations = Vec::new();
    for block in &backbone.blocks {
        x = block_forward(block, &x, backbone.bn_eps)?;
        if keep_activations {
            activations.push(x.clone());
        }
    }
    let d = x.value().len() / batch;
    Ok(BackboneOutput {
        features: x.reshape(&[batch, d])?,
        activations,
    })
}

pub fn classifier_forward(classifier: &Classifier<Tensor>, features: &Tensor) -> Result<Tensor> {
    Ok(linear(features, &classifier.weight, &classifier.bias)?)
}

/// The per-task context vector ν.
#[derive(Clone, Debug)]
pub struct ContextParams {
    pub nu: Tensor,
}

impl ContextParams {
    /// A zero vector attached to `graph` as a new leaf.
    pub fn reset(graph: &Graph, dim: usize) -> Self {
        Self {
            nu: graph.leaf(Array::zeros(&[dim])),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.nu.data().to_vec()
    }
}

/// Per-layer positive scalars γ, shape `[NUM_LAYERS]`.
#[derive(Clone, Debug)]
pub struct ScalingFactors {
    pub gamma: Tensor,
}

impl ScalingFactors {
    pub fn values(&self) -> Vec<f64> {
        self.gamma.data().to_vec()
    }

    /// γ of layer `l` (0-based) as a one-element tensor on the graph.
    pub fn layer(&self, l: usize) -> Result<Tensor> {
        Ok(self.gamma.gather(vec![l], &[1])?)
    }
}

pub fn generate_scaling_factors(sub: &SubNetwork<Tensor>, ctx: &ContextParams) -> Result<ScalingFactors> {
    let dim = ctx.nu.value().len();
    let nu = ctx.nu.reshape(&[1, dim])?;
    let h = linear(&nu, &sub.w1, &sub.b1)?.relu()?;
    let out = linear(&h, &sub.w2, &sub.b2)?.softplus()?;
    let l = out.value().len();
    Ok(ScalingFactors { gamma: out.reshape(&[l])? })
}

/// Frobenius norm of the conv weight of block `layer` (1-based).
pub fn layer_param_norm<T: HasValue>(backbone: &Backbone<T>, layer: usize) -> Result<f64> {
    let layers = backbone.blocks.len();
    if layer == 0 || layer > layers {
        return Err(Error::LayerOutOfRange { layer, layers });
    }
    Ok(backbone.blocks[layer - 1].weight.array().norm())
}

/// Conv-weight norm per backbone layer, then the joint norm of classifier
/// weight and bias: `NUM_LAYERS + 1` entries.
pub fn layer_norms<T: HasValue>(theta: &Theta<T>) -> Vec<f64> {
    let mut out: Vec<f64> = theta.backbone.blocks.iter().map(|b| b.weight.array().norm()).collect();
    let w = theta.classifier.weight.array().norm();
    let b = theta.classifier.bias.array().norm();
    out.push((w * w + b * b).sqrt());
    out
}
