//! Windowed sinusoidal positional encoding.
//!
//! Band `l` carries `sin(2^l * pi * x)` and `cos(2^l * pi * x)` scaled by a
//! weight that ramps from 0 to 1 as training progresses:
//! `w_l(n) = clamp(start_band + n * L / N - l, 0, 1)`.

use ndarray::Array2;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    /// Total number of frequency bands (L).
    pub bands: usize,
    /// Iterations until every band is fully open (N).
    pub window_iterations: u64,
    /// Bands open from the first iteration.
    pub start_band: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            bands: 12,
            window_iterations: 150_000,
            start_band: 1,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands < 1 {
            return Err(Error::Config("encoding needs at least one band".into()));
        }
        if self.window_iterations < 1 {
            return Err(Error::Config("encoding window must be at least one iteration".into()));
        }
        if self.start_band > self.bands {
            return Err(Error::Config("start_band exceeds the number of bands".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        3 + 6 * self.bands
    }

    /// Weight of band `band` at iteration `n`.
    pub fn band_weight(&self, band: usize, n: u64) -> f64 {
        let progress = n as f64 * self.bands as f64 / self.window_iterations as f64;
        (self.start_band as f64 + progress - band as f64).clamp(0.0, 1.0)
    }

    pub fn band_weights(&self, n: u64) -> Vec<f64> {
        (0..self.bands).map(|l| self.band_weight(l, n)).collect()
    }
}

/// Encodes one point. Layout: `x`, then per band `sin` (3) and `cos` (3).
pub fn encode(x: &Vector3<f64>, n: u64, config: &EncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; config.output_dim()];
    encode_into(x, &config.band_weights(n), &mut out);
    out
}

fn encode_into(x: &Vector3<f64>, weights: &[f64], out: &mut [f64]) {
    out[..3].copy_from_slice(x.as_slice());
    let mut freq = std::f64::consts::PI;
    for (l, w) in weights.iter().enumerate() {
        let base = 3 + 6 * l;
        for k in 0..3 {
            if *w == 0.0 {
                out[base + k] = 0.0;
                out[base + 3 + k] = 0.0;
            } else {
                let (s, c) = (freq * x[k]).sin_cos();
                out[base + k] = w * s;
                out[base + 3 + k] = w * c;
            }
        }
        freq *= 2.0;
    }
}

/// Encodes many points into the rows of a matrix.
pub fn encode_batch(points: &[Vector3<f64>], n: u64, config: &EncodingConfig) -> Array2<f64> {
    let weights = config.band_weights(n);
    let dim = config.output_dim();
    let mut out = Array2::zeros((points.len(), dim));
    for (row, p) in out.rows_mut().into_iter().zip(points) {
        encode_into(p, &weights, row.into_slice().expect("row-major"));
    }
    out
}
