//! Loss and gradient behaviour along the inner-loop gradient direction.
//!
//! For every inner step `s` (gradient `h_s` taken at `θ_s`) and every rate
//! `ᾱ_j = 0.5·α·j`, `j = 1..=8`, the probe point is `θ_s − ᾱ_j·h_s`. Per
//! rate, the loss and the gradient change `‖h(θ^j) − h_s‖` are averaged over
//! steps and tasks; the record reports the spread of those means over `j`.

use crate::autodiff::Array;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SWEEP_POINTS: usize = 8;

/// `{0.5·α·j : j = 1..=8}`.
pub fn sweep_rates(alpha: f64) -> Vec<f64> {
    (1..=SWEEP_POINTS).map(|j| 0.5 * alpha * j as f64).collect()
}

/// One inner step: where the gradient was taken and its value.
#[derive(Clone, Debug)]
pub struct StepPoint {
    pub task: usize,
    pub params: Vec<Array>,
    pub grad: Vec<Array>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRecord {
    pub iteration: u64,
    /// `max_j − min_j` of the mean loss.
    pub loss_variation: f64,
    /// `max_j − min_j` of the mean gradient change.
    pub gradient_predictiveness: f64,
    /// Empty when some step had a zero gradient.
    pub effective_beta: Option<f64>,
}

/// Per-rate means behind a [`LandscapeRecord`].
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeSweep {
    pub rates: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub mean_grad_change: Vec<f64>,
    /// Mean loss after the step actually taken (rate α).
    pub loss_at_alpha: f64,
}

impl LandscapeSweep {
    pub fn loss_envelope(&self) -> (f64, f64) {
        envelope(&self.mean_loss)
    }

    pub fn grad_envelope(&self) -> (f64, f64) {
        envelope(&self.mean_grad_change)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub iteration: u64,
    pub j: usize,
    pub rate: f64,
    pub mean_loss: f64,
    pub mean_grad_change: f64,
}

impl LandscapeSweep {
    pub fn rows(&self, iteration: u64) -> Vec<SweepRow> {
        (0..self.rates.len())
            .map(|j| SweepRow {
                iteration,
                j: j + 1,
                rate: self.rates[j],
                mean_loss: self.mean_loss[j],
                mean_grad_change: self.mean_grad_change[j],
            })
            .collect()
    }
}

fn envelope(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn norm_of(parts: &[Array]) -> f64 {
    parts.iter().map(|a| a.norm().powi(2)).sum::<f64>().sqrt()
}

fn diff_norm(a: &[Array], b: &[Array]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)))
        .sum::<f64>()
        .sqrt()
}

fn step_along(params: &[Array], grad: &[Array], rate: f64) -> Result<Vec<Array>> {
    params
        .iter()
        .zip(grad)
        .map(|(p, g)| {
            let d = p.data().iter().zip(g.data()).map(|(w, h)| w - rate * h).collect();
            Ok(Array::new(p.shape().to_vec(), d)?)
        })
        .collect()
}

/// Evaluates the sweep. `eval(task, params)` returns the task's support loss
/// and its gradient at `params`.
pub fn landscape_sweep(
    iteration: u64,
    points: &[StepPoint],
    alpha: f64,
    mut eval: impl FnMut(usize, &[Array]) -> Result<(f64, Vec<Array>)>,
) -> Result<(LandscapeRecord, LandscapeSweep)> {
    if points.is_empty() {
        return Err(Error::InvalidInput("landscape sweep needs at least one step".into()));
    }
    let rates = sweep_rates(alpha);
    let n = points.len() as f64;
    let mut mean_loss = vec![0.0; rates.len()];
    let mut mean_change = vec![0.0; rates.len()];
    let mut loss_at_alpha = 0.0;
    let mut betas = Vec::with_capacity(points.len());
    let mut undefined = false;
    for p in points {
        let mut best: Option<(f64, f64)> = None;
        for (j, &rate) in rates.iter().enumerate() {
            let probe = step_along(&p.params, &p.grad, rate)?;
            let (loss, g) = eval(p.task, &probe)?;
            let change = diff_norm(&g, &p.grad);
            mean_loss[j] += loss / n;
            mean_change[j] += change / n;
            if best.is_none_or(|(c, _)| change > c) {
                best = Some((change, rate));
            }
        }
        let (change, rate) = best.expect("sweep is non-empty");
        let step = rate * norm_of(&p.grad);
        if step == 0.0 {
            undefined = true;
        } else {
            betas.push(change / step);
        }
        let realized = step_along(&p.params, &p.grad, alpha)?;
        loss_at_alpha += eval(p.task, &realized)?.0 / n;
    }
    let (llo, lhi) = envelope(&mean_loss);
    let (glo, ghi) = envelope(&mean_change);
    let record = LandscapeRecord {
        iteration,
        loss_variation: lhi - llo,
        gradient_predictiveness: ghi - glo,
        effective_beta: (!undefined).then(|| betas.iter().sum::<f64>() / betas.len() as f64),
    };
    Ok((
        record,
        LandscapeSweep {
            rates,
            mean_loss,
            mean_grad_change: mean_change,
            loss_at_alpha,
        },
    ))
}
