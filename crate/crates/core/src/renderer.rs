//! Absorption-only ray quadrature.
//!
//! Predicted intensity follows Beer-Lambert over the composite field:
//! `I = I0 * exp(-sum_k (sigma_s,k + sigma_d,k) * dt_k)`.

use ndarray::Array2;
use rand::Rng;

use crate::diffnet::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Ray;

/// Optical depths above this are clamped before exponentiation.
pub const MAX_OPTICAL_DEPTH: f64 = 80.0;

/// Sample positions along a ray and the length each sample stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
}

/// Stratified samples over `[t_near, t_far]`: midpoints of `count` equal
/// strata, or one uniform draw per stratum when `jitter` is given.
pub fn sample_ray<R: Rng>(ray: &Ray, count: usize, jitter: Option<&mut R>) -> Result<RaySamples> {
    if count < 2 {
        return Err(Error::Argument(format!("need at least 2 samples per ray, got {count}")));
    }
    let step = (ray.t_far - ray.t_near) / count as f64;
    let t = match jitter {
        None => (0..count)
            .map(|k| ray.t_near + (k as f64 + 0.5) * step)
            .collect(),
        Some(rng) => (0..count)
            .map(|k| ray.t_near + (k as f64 + rng.gen::<f64>()) * step)
            .collect(),
    };
    Ok(RaySamples {
        t,
        dt: vec![step; count],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityChannel {
    Static,
    Dynamic,
    Composite,
}

/// Samples of one ray together with the two field channels evaluated there.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleSet {
    /// Entry distance of the ray into the scene.
    pub t_near: f64,
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
    pub sigma_static: Vec<f64>,
    pub sigma_dynamic: Vec<f64>,
}

impl RaySampleSet {
    pub fn new(t_near: f64, samples: RaySamples, sigma_static: Vec<f64>, sigma_dynamic: Vec<f64>) -> Result<Self> {
        let n = samples.t.len();
        if sigma_static.len() != n || sigma_dynamic.len() != n || samples.dt.len() != n {
            return Err(Error::Argument("sample arrays differ in length".into()));
        }
        if samples.t.windows(2).any(|w| w[1] <= w[0]) || samples.t.first().is_some_and(|t| *t < t_near) {
            return Err(Error::Argument("sample positions must increase from t_near".into()));
        }
        if samples.dt.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Argument("sample lengths must be positive".into()));
        }
        if sigma_static.iter().chain(&sigma_dynamic).any(|s| !(*s >= 0.0)) {
            return Err(Error::Argument("densities must be non-negative".into()));
        }
        Ok(Self {
            t_near,
            t: samples.t,
            dt: samples.dt,
            sigma_static,
            sigma_dynamic,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn channel(&self, channel: DensityChannel, k: usize) -> f64 {
        match channel {
            DensityChannel::Static => self.sigma_static[k],
            DensityChannel::Dynamic => self.sigma_dynamic[k],
            DensityChannel::Composite => self.sigma_static[k] + self.sigma_dynamic[k],
        }
    }
}

/// `sum_k sigma_k * dt_k` for one channel.
pub fn accumulated_density(samples: &RaySampleSet, channel: DensityChannel) -> f64 {
    (0..samples.len())
        .map(|k| samples.channel(channel, k) * samples.dt[k])
        .sum()
}

/// Beer-Lambert intensity of the composite field.
pub fn render_intensity(samples: &RaySampleSet, i0: f64) -> f64 {
    intensity_from_depth(accumulated_density(samples, DensityChannel::Composite), i0)
}

pub fn intensity_from_depth(depth: f64, i0: f64) -> f64 {
    i0 * (-depth.min(MAX_OPTICAL_DEPTH)).exp()
}

/// Records rendering of a batch on `tape`. `sigma` is the composite density
/// (`rays x samples`), `dt` the matching sample lengths. Returns `rays x 1`.
pub fn render_intensity_tape(tape: &mut Tape, sigma: Var, dt: Array2<f64>, i0: f64) -> Var {
    let weighted = tape.mul_const(sigma, dt);
    let depth = tape.sum_cols(weighted);
    let depth = tape.clamp(depth, f64::NEG_INFINITY, MAX_OPTICAL_DEPTH);
    let neg = tape.scale(depth, -1.0);
    let trans = tape.exp(neg);
    tape.scale(trans, i0)
}
