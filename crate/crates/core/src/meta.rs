//! Bi-level optimization: MAML and CxGrad inner loops, the Adam outer step
//! and episodic evaluation.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::functional::{argmax_rows, l2_norm, scale_by, softmax_cross_entropy};
use crate::autodiff::{Array, Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{generate_scaling_factors, layer_norms, ContextParams, ModelConfig, ScalingFactors, SubNetwork, Theta};
use crate::tasks::{Episode, LabeledSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Maml,
    Cxgrad,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Maml => "maml",
            LearnerKind::Cxgrad => "cxgrad",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(LearnerKind::Maml),
            "cxgrad" => Ok(LearnerKind::Cxgrad),
            _ => Err(Error::config("learner", format!("unknown learner `{s}` (maml | cxgrad)"))),
        }
    }
}

/// When the context vector is reset to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextScheme {
    /// Once per task, then updated jointly with θ at every step.
    #[default]
    TaskWise,
    /// Before every inner step, followed by a fresh warm-up update.
    StepWise,
}

impl fmt::Display for ContextScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextScheme::TaskWise => "task-wise",
            ContextScheme::StepWise => "step-wise",
        })
    }
}

impl FromStr for ContextScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task-wise" => Ok(ContextScheme::TaskWise),
            "step-wise" => Ok(ContextScheme::StepWise),
            _ => Err(Error::config(
                "context_scheme",
                format!("unknown scheme `{s}` (task-wise | step-wise)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerLoopConfig {
    /// Inner learning rate.
    pub alpha: f64,
    /// Context learning rate.
    pub beta: f64,
    /// Outer (Adam) learning rate.
    pub eta: f64,
    pub steps: usize,
    /// Differentiate through the inner updates. `false` is the first-order
    /// approximation.
    pub second_order: bool,
    pub context_scheme: ContextScheme,
    /// Adapt the classifier only; the backbone keeps its initialization.
    pub head_only: bool,
    /// Keep φ fixed during meta-training.
    pub freeze_subnetwork: bool,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 1.0,
            eta: 0.001,
            steps: 5,
            second_order: true,
            context_scheme: ContextScheme::TaskWise,
            head_only: false,
            freeze_subnetwork: false,
        }
    }
}

impl InnerLoopConfig {
    /// Rates must be finite and non-negative (zero disables that update);
    /// at least one inner step.
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Meta-learned state: θ = (backbone, classifier) and, for CxGrad, φ.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaKnowledge {
    pub model: ModelConfig,
    pub theta: Theta<Array>,
    pub phi: Option<SubNetwork<Array>>,
}

impl MetaKnowledge {
    pub fn init(kind: LearnerKind, model: &ModelConfig, rng: &mut impl Rng) -> Self {
        let theta = Theta::init(model, rng);
        let phi = match kind {
            LearnerKind::Maml => None,
            LearnerKind::Cxgrad => Some(SubNetwork::init(model, rng)),
        };
        Self {
            model: model.clone(),
            theta,
            phi,
        }
    }

    pub fn kind(&self) -> LearnerKind {
        if self.phi.is_some() {
            LearnerKind::Cxgrad
        } else {
            LearnerKind::Maml
        }
    }

    /// θ parameters, then φ parameters, in their `named` order.
    pub fn named(&self) -> Vec<(String, &Array)> {
        let mut out = self.theta.named();
        if let Some(phi) = &self.phi {
            out.extend(phi.named());
        }
        out
    }
}

/// Detached summary of one task adaptation.
#[derive(Clone, Debug)]
pub struct AdaptResult {
    pub theta: Theta<Array>,
    /// Final ν (CxGrad only).
    pub context: Option<Vec<f64>>,
    /// One row per inner step: conv-weight gradient norms for each backbone
    /// layer, then the classifier gradient norm.
    pub grad_norms: Vec<Vec<f64>>,
    /// Support loss at the point each step's gradient was taken.
    pub support_losses: Vec<f64>,
    /// γ from every IGS call, warm-ups included.
    pub gammas: Vec<Vec<f64>>,
    /// Parameters each step's gradient was taken at (post-IGS for CxGrad).
    /// Filled only when captured.
    pub step_points: Vec<Theta<Array>>,
    pub step_grads: Vec<Theta<Array>>,
}

/// An adaptation whose result still lives on its graph.
pub struct Adaptation {
    pub theta: Theta<Tensor>,
    pub context: Option<ContextParams>,
    pub result: AdaptResult,
}

pub fn support_loss(theta: &Theta<Tensor>, set: &LabeledSet) -> Result<Tensor> {
    let logits = theta.logits(&Tensor::constant(set.images.clone()))?;
    Ok(softmax_cross_entropy(&logits, &set.labels)?)
}

/// Fraction of `set` classified correctly (argmax, lowest index on ties).
pub fn accuracy(theta: &Theta<Tensor>, set: &LabeledSet) -> Result<f64> {
    let logits = theta.logits(&Tensor::constant(set.images.clone()))?;
    Ok(accuracy_of(&logits, &set.labels))
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Implicit gradient scaling: every backbone conv weight becomes
/// `γ_ℓ · w_ℓ / ‖w_ℓ‖`, recorded so gradients reach φ and ν. Classifier and
/// BN affine parameters pass through unchanged.
pub fn igs(theta: &Theta<Tensor>, ctx: &ContextParams, phi: &SubNetwork<Tensor>) -> Result<(Theta<Tensor>, ScalingFactors)> {
    let factors = generate_scaling_factors(phi, ctx)?;
    let mut out = theta.clone();
    for (l, block) in out.backbone.blocks.iter_mut().enumerate() {
        let norm = l2_norm(&block.weight)?;
        if norm.item() == 0.0 {
            return Err(Error::ZeroNormLayer(l + 1));
        }
        let s = factors.layer(l)?.mul(&norm.reshape(&[1])?.powf(-1.0)?)?;
        block.weight = scale_by(&block.weight, &s)?;
    }
    Ok((out, factors))
}

/// `ν − β·∇_ν L(θ'; support)` where `theta_scaled` came from [`igs`] with
/// this `ctx`. With `create_graph` the update stays differentiable.
pub fn update_context(
    theta_scaled: &Theta<Tensor>,
    ctx: &ContextParams,
    support: &LabeledSet,
    beta: f64,
    create_graph: bool,
) -> Result<ContextParams> {
    let graph = ctx.nu.graph().ok_or(Error::ContextDetached)?.clone();
    let loss = support_loss(theta_scaled, support)?;
    context_step(&graph, &loss, ctx, beta, create_graph)
}

fn context_step(graph: &Graph, loss: &Tensor, ctx: &ContextParams, beta: f64, create_graph: bool) -> Result<ContextParams> {
    if !ctx.nu.requires_grad() || loss.graph().is_none() {
        return Err(Error::ContextDetached);
    }
    let g = graph
        .grad(loss, &[&ctx.nu], create_graph)?
        .remove(0)
        .ok_or(Error::ContextDetached)?;
    Ok(ContextParams {
        nu: ctx.nu.sub(&g.scale(beta)?)?,
    })
}

/// Trace of [`inner_sgd`].
pub struct SgdTrace {
    pub params: Vec<Tensor>,
    pub losses: Vec<f64>,
    /// Gradient values per step; `None` where the loss does not depend on a
    /// parameter.
    pub grads: Vec<Vec<Option<Array>>>,
}

/// Plain gradient descent `p ← p − α·∇L(p)` for `steps` steps. Entries with
/// `trainable[i] == false` are left untouched. With `create_graph` the
/// result is differentiable with respect to the starting point.
pub fn inner_sgd(
    graph: &Graph,
    params: Vec<Tensor>,
    trainable: &[bool],
    steps: usize,
    alpha: f64,
    create_graph: bool,
    mut loss_fn: impl FnMut(&[Tensor]) -> Result<Tensor>,
) -> Result<SgdTrace> {
    let mut params = params;
    let mut losses = Vec::with_capacity(steps);
    let mut grads = Vec::with_capacity(steps);
    for _ in 0..steps {
        let loss = loss_fn(&params)?;
        let refs: Vec<&Tensor> = params.iter().collect();
        let g = graph.grad(&loss, &refs, create_graph)?;
        losses.push(loss.item());
        grads.push(g.iter().map(|t| t.as_ref().map(|t| t.value().clone())).collect());
        params = descend(&params, &g, trainable, alpha)?;
    }
    Ok(SgdTrace { params, losses, grads })
}

fn descend(params: &[Tensor], grads: &[Option<Tensor>], trainable: &[bool], alpha: f64) -> Result<Vec<Tensor>> {
    params
        .iter()
        .zip(grads)
        .zip(trainable)
        .map(|((p, g), &t)| match g {
            Some(g) if t => Ok(p.sub(&g.scale(alpha)?)?),
            _ => Ok(p.clone()),
        })
        .collect()
}

fn trainable_mask(theta: &Theta<Tensor>, head_only: bool) -> Vec<bool> {
    theta
        .named()
        .iter()
        .map(|(name, _)| !head_only || name.starts_with("classifier."))
        .collect()
}

fn grad_theta(template: &Theta<Tensor>, grads: &[Option<Array>]) -> Result<Theta<Array>> {
    let vals = template
        .params()
        .iter()
        .zip(grads)
        .map(|(p, g)| g.clone().unwrap_or_else(|| Array::zeros(p.shape())))
        .collect();
    template.with_values(vals)
}

/// MAML adaptation of `theta` (already on `graph`) to `support`.
pub fn maml_adapt_on(
    graph: &Graph,
    theta: Theta<Tensor>,
    support: &LabeledSet,
    cfg: &InnerLoopConfig,
    capture: bool,
) -> Result<Adaptation> {
    let mask = trainable_mask(&theta, cfg.head_only);
    let start: Vec<Tensor> = theta.params().into_iter().cloned().collect();
    let mut points = Vec::new();
    let trace = inner_sgd(graph, start, &mask, cfg.steps, cfg.alpha, cfg.second_order, |p| {
        let t = theta.with_values(p.to_vec())?;
        if capture {
            points.push(t.values());
        }
        support_loss(&t, support)
    })?;
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    let mut step_grads = Vec::new();
    for g in &trace.grads {
        let gt = grad_theta(&theta, g)?;
        grad_norms.push(layer_norms(&gt));
        if capture {
            step_grads.push(gt);
        }
    }
    let adapted = theta.with_values(trace.params)?;
    Ok(Adaptation {
        result: AdaptResult {
            theta: adapted.values(),
            context: None,
            grad_norms,
            support_losses: trace.losses,
            gammas: Vec::new(),
            step_points: points,
            step_grads,
        },
        theta: adapted,
        context: None,
    })
}

/// CxGrad adaptation: reset ν, warm it up on the support loss, then at each
/// step rescale the backbone by IGS and update θ and ν from one backward
/// pass. In step-wise mode ν is reset and warmed up before every step and
/// only θ carries over.
pub fn cxgrad_adapt_on(
    graph: &Graph,
    theta: Theta<Tensor>,
    phi: &SubNetwork<Tensor>,
    support: &LabeledSet,
    cfg: &InnerLoopConfig,
    capture: bool,
) -> Result<Adaptation> {
    let dim = phi.w1.shape()[1];
    let create = cfg.second_order;
    let mask = trainable_mask(&theta, cfg.head_only);
    let mut theta = theta;
    let mut gammas = Vec::new();
    let warm_up = |theta: &Theta<Tensor>, gammas: &mut Vec<Vec<f64>>| -> Result<ContextParams> {
        let ctx = ContextParams::reset(graph, dim);
        let (scaled, factors) = igs(theta, &ctx, phi)?;
        gammas.push(factors.values());
        let loss = support_loss(&scaled, support)?;
        context_step(graph, &loss, &ctx, cfg.beta, create)
    };
    let mut ctx = match cfg.context_scheme {
        ContextScheme::TaskWise => warm_up(&theta, &mut gammas)?,
        ContextScheme::StepWise => ContextParams::reset(graph, dim),
    };
    let mut result = AdaptResult {
        theta: theta.values(),
        context: None,
        grad_norms: Vec::with_capacity(cfg.steps),
        support_losses: Vec::with_capacity(cfg.steps),
        gammas: Vec::new(),
        step_points: Vec::new(),
        step_grads: Vec::new(),
    };
    for _ in 0..cfg.steps {
        if cfg.context_scheme == ContextScheme::StepWise {
            ctx = warm_up(&theta, &mut gammas)?;
        }
        let (scaled, factors) = igs(&theta, &ctx, phi)?;
        gammas.push(factors.values());
        let loss = support_loss(&scaled, support)?;
        let params: Vec<Tensor> = scaled.params().into_iter().cloned().collect();
        let mut targets: Vec<&Tensor> = params.iter().collect();
        targets.push(&ctx.nu);
        let mut grads = graph.grad(&loss, &targets, create)?;
        let g_nu = grads.pop().flatten();
        let gvals: Vec<Option<Array>> = grads.iter().map(|g| g.as_ref().map(|t| t.value().clone())).collect();
        let gt = grad_theta(&scaled, &gvals)?;
        result.grad_norms.push(layer_norms(&gt));
        result.support_losses.push(loss.item());
        if capture {
            result.step_points.push(scaled.values());
            result.step_grads.push(gt);
        }
        theta = scaled.with_values(descend(&params, &grads, &mask, cfg.alpha)?)?;
        if cfg.context_scheme == ContextScheme::TaskWise {
            if let Some(g) = g_nu {
                ctx = ContextParams {
                    nu: ctx.nu.sub(&g.scale(cfg.beta)?)?,
                };
            }
        }
    }
    result.theta = theta.values();
    result.context = Some(ctx.values());
    result.gammas = gammas;
    Ok(Adaptation {
        theta,
        context: Some(ctx),
        result,
    })
}

/// MAML adaptation of `meta.theta` to the episode's support set.
pub fn maml_adapt(meta: &MetaKnowledge, episode: &Episode, cfg: &InnerLoopConfig) -> Result<AdaptResult> {
    adapt_with(meta, LearnerKind::Maml, episode, cfg, false)
}

/// CxGrad adaptation; `meta` must carry a sub-network.
pub fn cxgrad_adapt(meta: &MetaKnowledge, episode: &Episode, cfg: &InnerLoopConfig) -> Result<AdaptResult> {
    adapt_with(meta, LearnerKind::Cxgrad, episode, cfg, false)
}

/// Adapts with the given learner, optionally capturing per-step points and
/// gradients.
pub fn adapt_with(meta: &MetaKnowledge, kind: LearnerKind, episode: &Episode, cfg: &InnerLoopConfig, capture: bool) -> Result<AdaptResult> {
    check_support(episode)?;
    let graph = Graph::new();
    Ok(adapt_on(&graph, meta, kind, &meta.theta.leaves(&graph), None, episode, cfg, capture)?.result)
}

fn check_support(episode: &Episode) -> Result<()> {
    if episode.support.labels.is_empty() {
        return Err(Error::InvalidInput("episode support set is empty".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adapt_on(
    graph: &Graph,
    meta: &MetaKnowledge,
    kind: LearnerKind,
    theta: &Theta<Tensor>,
    phi: Option<&SubNetwork<Tensor>>,
    episode: &Episode,
    cfg: &InnerLoopConfig,
    capture: bool,
) -> Result<Adaptation> {
    match kind {
        LearnerKind::Maml => maml_adapt_on(graph, theta.clone(), &episode.support, cfg, capture),
        LearnerKind::Cxgrad => {
            let owned;
            let phi = match phi {
                Some(p) => p,
                None => {
                    let stored = meta
                        .phi
                        .as_ref()
                        .ok_or_else(|| Error::InvalidInput("CxGrad adaptation needs a sub-network".into()))?;
                    owned = stored.map(|a| Tensor::constant(a.clone()));
                    &owned
                }
            };
            cxgrad_adapt_on(graph, theta.clone(), phi, &episode.support, cfg, capture)
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Moment buffers sized for `params`, all zero.
    pub fn for_params(lr: f64, params: &[&Array]) -> Self {
        let mut a = Self::new(lr);
        a.m = params.iter().map(|p| Array::zeros(p.shape())).collect();
        a.v = a.m.clone();
        a
    }

    /// One update of `params[i]` for every `i` with `Some` gradient. Moments
    /// of skipped slots are left untouched.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Option<Array>]) -> Result<()> {
        if self.m.len() != params.len() || grads.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::InvalidInput(format!(
                    "gradient {} shape {:?} != {:?}",
                    i,
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Metrics of one outer step.
#[derive(Clone, Debug)]
pub struct OuterMetrics {
    pub query_loss: f64,
    pub query_accuracy: f64,
    pub adaptations: Vec<AdaptResult>,
}

struct TaskOutcome {
    grads: Vec<Option<Array>>,
    query_loss: f64,
    query_accuracy: f64,
    adaptation: AdaptResult,
}

/// Query loss and meta-gradient of one episode. The gradient list follows
/// [`MetaKnowledge::named`]; φ entries are `None` when frozen.
fn task_gradient(meta: &MetaKnowledge, episode: &Episode, cfg: &InnerLoopConfig) -> Result<TaskOutcome> {
    check_support(episode)?;
    let graph = Graph::new();
    let theta = meta.theta.leaves(&graph);
    let phi = meta.phi.as_ref().map(|p| {
        if cfg.freeze_subnetwork {
            p.map(|a| Tensor::constant(a.clone()))
        } else {
            p.leaves(&graph)
        }
    });
    let adapted = adapt_on(&graph, meta, meta.kind(), &theta, phi.as_ref(), episode, cfg, false)?;
    let logits = adapted.theta.logits(&Tensor::constant(episode.query.images.clone()))?;
    let loss = softmax_cross_entropy(&logits, &episode.query.labels)?;
    let mut targets: Vec<&Tensor> = theta.params();
    if let (Some(phi), false) = (&phi, cfg.freeze_subnetwork) {
        targets.extend(phi.params());
    }
    let mut grads: Vec<Option<Array>> = graph
        .grad(&loss, &targets, false)?
        .into_iter()
        .zip(&targets)
        .map(|(g, t)| Some(g.map(|g| g.value().clone()).unwrap_or_else(|| Array::zeros(t.shape()))))
        .collect();
    if let (Some(phi), true) = (&phi, cfg.freeze_subnetwork) {
        grads.extend(std::iter::repeat_n(None, phi.params().len()));
    }
    Ok(TaskOutcome {
        grads,
        query_loss: loss.item(),
        query_accuracy: accuracy_of(&logits, &episode.query.labels),
        adaptation: adapted.result,
    })
}

/// Per-episode meta-gradients, computed on up to `workers` threads and
/// returned in episode order.
fn task_gradients(meta: &MetaKnowledge, episodes: &[Episode], cfg: &InnerLoopConfig, workers: usize) -> Result<Vec<TaskOutcome>> {
    let workers = workers.clamp(1, episodes.len().max(1));
    if workers == 1 {
        return episodes.iter().map(|e| task_gradient(meta, e, cfg)).collect();
    }
    let mut slots: Vec<Option<Result<TaskOutcome>>> = (0..episodes.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..episodes.len())
                        .step_by(workers)
                        .map(|i| (i, task_gradient(meta, &episodes[i], cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every episode processed")).collect()
}

/// One meta-update: adapt to each episode, sum the query losses, backpropagate
/// through the inner loops and apply Adam to θ (and φ unless frozen).
pub fn outer_step(
    meta: &mut MetaKnowledge,
    episodes: &[Episode],
    cfg: &InnerLoopConfig,
    opt: &mut Adam,
    workers: usize,
) -> Result<OuterMetrics> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("outer step needs at least one episode".into()));
    }
    let outcomes = task_gradients(meta, episodes, cfg, workers)?;
    let n = outcomes.len() as f64;
    let mut total: Vec<Option<Array>> = outcomes[0].grads.clone();
    for o in &outcomes[1..] {
        for (acc, g) in total.iter_mut().zip(&o.grads) {
            if let (Some(a), Some(g)) = (acc.as_mut(), g) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
    if opt.m.is_empty() {
        *opt = Adam::for_params(opt.lr, &meta.named().into_iter().map(|(_, a)| a).collect::<Vec<_>>());
    }
    opt.lr = cfg.eta;
    {
        let mut params: Vec<&mut Array> = Vec::new();
        collect_theta_mut(&mut meta.theta, &mut params);
        if let Some(phi) = meta.phi.as_mut() {
            params.extend([&mut phi.w1, &mut phi.b1, &mut phi.w2, &mut phi.b2]);
        }
        opt.step(&mut params, &total)?;
    }
    Ok(OuterMetrics {
        query_loss: outcomes.iter().map(|o| o.query_loss).sum::<f64>() / n,
        query_accuracy: outcomes.iter().map(|o| o.query_accuracy).sum::<f64>() / n,
        adaptations: outcomes.into_iter().map(|o| o.adaptation).collect(),
    })
}

fn collect_theta_mut<'a>(theta: &'a mut Theta<Array>, out: &mut Vec<&'a mut Array>) {
    for b in theta.backbone.blocks.iter_mut() {
        out.extend([&mut b.weight, &mut b.bn_gamma, &mut b.bn_beta]);
    }
    out.extend([&mut theta.classifier.weight, &mut theta.classifier.bias]);
}

/// Mean ± 1.96·σ/√n (population σ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                ci95: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
            n,
        }
    }
}

impl fmt::Display for MeanCi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.ci95, self.n)
    }
}

/// Adapts to each of the first `n_tasks` episodes from `episodes` and
/// reports query accuracy. Inner loops run first-order: the adapted values
/// are the same and no second-order graph is kept.
pub fn evaluate<I>(meta: &MetaKnowledge, episodes: I, cfg: &InnerLoopConfig, n_tasks: usize) -> Result<MeanCi>
where
    I: IntoIterator<Item = Result<Episode>>,
{
    if n_tasks == 0 {
        return Err(Error::InvalidInput("n_tasks must be at least 1".into()));
    }
    let cfg = InnerLoopConfig {
        second_order: false,
        ..cfg.clone()
    };
    let mut accs = Vec::with_capacity(n_tasks);
    for episode in episodes.into_iter().take(n_tasks) {
        let episode = episode?;
        let r = adapt_with(meta, meta.kind(), &episode, &cfg, false)?;
        accs.push(accuracy(&r.theta.constants(), &episode.query)?);
    }
    if accs.len() < n_tasks {
        return Err(Error::InvalidInput(format!(
            "episode stream ended after {} of {n_tasks} tasks",
            accs.len()
        )));
    }
    Ok(MeanCi::of(&accs))
}
