//! Procedural grayscale classes.
//!
//! `Pattern`: an oriented grating plus a few Gaussian blobs; samples jitter
//! the phase, orientation, contrast and blob positions, then add pixel noise.
//! `Gaussian`: a smooth per-class mean image plus pixel noise, used as a
//! second domain with different statistics.
//!
//! All jitter and noise amplitudes scale with `noise`; at 0 every sample of
//! a class is the same image.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_indexed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Pattern,
    Gaussian,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Pattern => "pattern",
            Family::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pattern" => Ok(Family::Pattern),
            "gaussian" => Ok(Family::Gaussian),
            _ => Err(Error::config("tasks.family", format!("unknown family `{s}` (pattern | gaussian)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amplitude: f64,
}

/// Generative parameters of one class, fixed by `(family, class_id, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClassSpec {
    pub family: Family,
    pub class_id: usize,
    pub seed: u64,
    pub noise: f64,
    pub image_size: usize,
    orientation: f64,
    frequency: f64,
    phase: f64,
    contrast: f64,
    blobs: Vec<Blob>,
}

impl SyntheticClassSpec {
    pub fn new(family: Family, class_id: usize, seed: u64, noise: f64, image_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, family_tag(family), class_id as u64, 0));
        let (orientation, frequency, phase, contrast, n_blobs) = match family {
            Family::Pattern => (
                rng.random_range(0.0..PI),
                rng.random_range(1.5..5.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.15..0.35),
                rng.random_range(1..=3),
            ),
            Family::Gaussian => (0.0, 0.0, 0.0, 0.0, 4),
        };
        let blobs = (0..n_blobs)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Blob {
                    cx: rng.random_range(0.2..0.8),
                    cy: rng.random_range(0.2..0.8),
                    radius: rng.random_range(0.06..0.18),
                    amplitude: sign * rng.random_range(0.3..0.5),
                }
            })
            .collect();
        Self {
            family,
            class_id,
            seed,
            noise,
            image_size,
            orientation,
            frequency,
            phase,
            contrast,
            blobs,
        }
    }

    /// The deterministic sample `index` of this class, flattened `[1, h, w]`.
    pub fn sample(&self, index: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(self.seed, "sample", self.class_id as u64, index));
        self.draw(&mut rng)
    }

    /// One sample with jitter drawn from `rng`.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let nz = self.noise;
        let mut gauss = |sd: f64| -> f64 {
            if nz == 0.0 {
                0.0
            } else {
                Normal::new(0.0, sd * nz).expect("positive sd").sample(rng)
            }
        };
        let orientation = self.orientation + gauss(0.08);
        let phase = self.phase + gauss(0.6);
        let contrast = self.contrast * (1.0 + gauss(0.1));
        let offset = gauss(0.03);
        let blobs: Vec<Blob> = self
            .blobs
            .iter()
            .map(|b| Blob {
                cx: b.cx + gauss(0.03),
                cy: b.cy + gauss(0.03),
                ..b.clone()
            })
            .collect();
        let s = self.image_size;
        let (co, si) = (orientation.cos(), orientation.sin());
        let mut out = Vec::with_capacity(s * s);
        for r in 0..s {
            let y = (r as f64 + 0.5) / s as f64;
            for c in 0..s {
                let x = (c as f64 + 0.5) / s as f64;
                let mut v = 0.5 + offset;
                if self.family == Family::Pattern {
                    v += contrast * (2.0 * PI * self.frequency * (x * co + y * si) + phase).cos();
                }
                for b in &blobs {
                    let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                    v += b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp();
                }
                v += gauss(match self.family {
                    Family::Pattern => 0.05,
                    Family::Gaussian => 0.1,
                });
                out.push(v.clamp(0.0, 1.0));
            }
        }
        out
    }
}

fn family_tag(f: Family) -> &'static str {
    match f {
        Family::Pattern => "class/pattern",
        Family::Gaussian => "class/gaussian",
    }
}

/// `n` fresh samples of a class as `[n, 1, h, w]`, jitter drawn from `rng`.
pub fn generate_synthetic_class(spec: &SyntheticClassSpec, n: usize, rng: &mut impl Rng) -> Result<Array> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let s = spec.image_size;
    let mut data = Vec::with_capacity(n * s * s);
    for _ in 0..n {
        data.extend(spec.draw(rng));
    }
    Ok(Array::new(vec![n, 1, s, s], data)?)
}
