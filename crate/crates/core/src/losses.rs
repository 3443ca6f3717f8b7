//! Photometric, factorization, dynamic entropy and dynamic occlusion losses,
//! plus the ramped weights that combine them.
//!
//! Every term is available twice: as plain functions over a
//! [`RaySampleSet`] (used for logging and as a reference) and recorded on a
//! [`Tape`] for a whole batch (used for training).

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffnet::{Tape, Var};
use crate::error::{Error, Result};
use crate::renderer::{accumulated_density, render_intensity, render_intensity_tape, DensityChannel, RaySampleSet};

/// Guard in the static/dynamic ratio denominator.
pub const EPS_RATIO: f64 = 1e-10;
/// Guard in the ray-density normalizer and inside its logarithm.
pub const EPS_PROB: f64 = 1e-10;
/// Binary-entropy arguments are clamped to `[EPS_ENTROPY, 1 - EPS_ENTROPY]`.
pub const EPS_ENTROPY: f64 = 1e-7;

/// Which subset of the objective is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// All four terms (L_f).
    Full,
    /// Everything except the occlusion term (L_d).
    Dynamic,
    /// Photometric only, with an independent static network per phase (L_s).
    Sparse,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Dynamic => "dynamic",
            Variant::Sparse => "sparse",
        }
    }

    pub fn has_dynamic_field(self) -> bool {
        self != Variant::Sparse
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "dynamic" => Ok(Variant::Dynamic),
            "sparse" => Ok(Variant::Sparse),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Held at `start` up to `delay`, linear to `end` over `ramp` iterations,
/// then held at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSchedule {
    pub start: f64,
    pub end: f64,
    pub delay: u64,
    pub ramp: u64,
}

impl WeightSchedule {
    pub fn value(&self, n: u64) -> f64 {
        if n <= self.delay {
            return self.start;
        }
        let since = n - self.delay;
        if self.ramp == 0 || since >= self.ramp {
            return self.end;
        }
        self.start + (self.end - self.start) * since as f64 / self.ramp as f64
    }

    /// Same shape with every iteration count multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            delay: scale_iterations(self.delay, scale),
            ramp: scale_iterations(self.ramp, scale),
            ..*self
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.start >= 0.0 && self.end >= 0.0 && self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::Config(format!("{name}: weights must be finite and non-negative")));
        }
        Ok(())
    }
}

pub fn scale_iterations(n: u64, scale: f64) -> u64 {
    (n as f64 * scale).round() as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// lambda_b
    pub factorization: WeightSchedule,
    /// lambda_e
    pub entropy: WeightSchedule,
    /// lambda_o
    pub occlusion: WeightSchedule,
    /// D: samples closer than this to the scene entry count as occluders.
    pub occlusion_distance: f64,
    /// Rays whose dynamic optical depth is below this are left out of the
    /// entropy term unless flagged as likely vessel rays.
    pub min_dynamic_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            factorization: WeightSchedule {
                start: 1e-12,
                end: 1e-10,
                delay: 40_000,
                ramp: 110_000,
            },
            entropy: WeightSchedule {
                start: 1e-12,
                end: 1e-10,
                delay: 0,
                ramp: 150_000,
            },
            occlusion: WeightSchedule {
                start: 1e-8,
                end: 1e-5,
                delay: 40_000,
                ramp: 110_000,
            },
            occlusion_distance: 0.2,
            min_dynamic_depth: 1e-4,
        }
    }
}

/// Effective weights at one iteration; zero for terms the variant drops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub factorization: f64,
    pub entropy: f64,
    pub occlusion: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.factorization.validate("factorization")?;
        self.entropy.validate("entropy")?;
        self.occlusion.validate("occlusion")?;
        if !(self.occlusion_distance >= 0.0) {
            return Err(Error::Config("occlusion_distance must be non-negative".into()));
        }
        if !(self.min_dynamic_depth >= 0.0) {
            return Err(Error::Config("min_dynamic_depth must be non-negative".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            factorization: self.factorization.scaled(scale),
            entropy: self.entropy.scaled(scale),
            occlusion: self.occlusion.scaled(scale),
            ..self.clone()
        }
    }

    /// Same schedules with every weight multiplied by `gain`.
    pub fn amplified(&self, gain: f64) -> Self {
        let amp = |w: &WeightSchedule| WeightSchedule {
            start: w.start * gain,
            end: w.end * gain,
            ..*w
        };
        Self {
            factorization: amp(&self.factorization),
            entropy: amp(&self.entropy),
            occlusion: amp(&self.occlusion),
            ..self.clone()
        }
    }

    pub fn weights(&self, n: u64, variant: Variant) -> LossWeights {
        match variant {
            Variant::Full => LossWeights {
                factorization: self.factorization.value(n),
                entropy: self.entropy.value(n),
                occlusion: self.occlusion.value(n),
            },
            Variant::Dynamic => LossWeights {
                factorization: self.factorization.value(n),
                entropy: self.entropy.value(n),
                occlusion: 0.0,
            },
            Variant::Sparse => LossWeights::default(),
        }
    }
}

/// Batch means of each term, the weights applied and the combined value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub photometric: f64,
    pub factorization: f64,
    pub entropy: f64,
    pub occlusion: f64,
    pub weights: LossWeights,
    pub total: f64,
    /// Rays left out of the entropy term.
    pub entropy_skipped: usize,
    pub rays: usize,
}

impl LossBundle {
    /// Adds partial sums from another chunk of the same batch.
    pub fn absorb(&mut self, other: &LossBundle) {
        self.photometric += other.photometric;
        self.factorization += other.factorization;
        self.entropy += other.entropy;
        self.occlusion += other.occlusion;
        self.total += other.total;
        self.entropy_skipped += other.entropy_skipped;
        self.rays += other.rays;
        self.weights = other.weights;
    }

    pub fn is_finite(&self) -> bool {
        [self.photometric, self.factorization, self.entropy, self.occlusion, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Per-ray reference implementations

/// Mean squared intensity error.
pub fn photometric(predicted: &[f64], target: &[f64]) -> f64 {
    assert_eq!(predicted.len(), target.len());
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predicted.len() as f64
}

/// Binary entropy in nats with its argument clamped away from 0 and 1.
pub fn binary_entropy(x: f64) -> f64 {
    let x = x.clamp(EPS_ENTROPY, 1.0 - EPS_ENTROPY);
    -(x * x.ln() + (1.0 - x) * (1.0 - x).ln())
}

/// Mean binary entropy of the dynamic share `sigma_d / (sigma_d + sigma_s)`.
pub fn factorization(samples: &RaySampleSet) -> f64 {
    samples
        .sigma_dynamic
        .iter()
        .zip(&samples.sigma_static)
        .map(|(d, s)| binary_entropy(d / (d + s + EPS_RATIO)))
        .sum::<f64>()
        / samples.len() as f64
}

/// Shannon entropy of the normalized dynamic density along the ray, or
/// `None` when the ray is skipped: dynamic optical depth below `min_depth`
/// and not flagged as a likely vessel ray.
pub fn dynamic_entropy(samples: &RaySampleSet, is_vessel_likely: bool, min_depth: f64) -> Option<f64> {
    if !is_vessel_likely && accumulated_density(samples, DensityChannel::Dynamic) < min_depth {
        return None;
    }
    let total: f64 = samples.sigma_dynamic.iter().sum::<f64>() + EPS_PROB;
    Some(
        -samples
            .sigma_dynamic
            .iter()
            .map(|s| {
                let p = s / total;
                p * p.clamp(EPS_PROB, 1.0).ln()
            })
            .sum::<f64>(),
    )
}

/// Dynamic density mass within `distance` of the ray's scene entry.
pub fn dynamic_occlusion(samples: &RaySampleSet, distance: f64) -> f64 {
    (0..samples.len())
        .filter(|&k| samples.t[k] - samples.t_near < distance)
        .map(|k| samples.sigma_dynamic[k] * samples.dt[k])
        .sum()
}

/// One ray as seen by the loss.
#[derive(Clone, Debug)]
pub struct LossRay {
    pub samples: RaySampleSet,
    pub target: f64,
    pub vessel_likely: bool,
}

/// Combined objective over a batch at iteration `n`.
pub fn full_loss(batch: &[LossRay], n: u64, variant: Variant, config: &LossConfig, i0: f64) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::Argument("loss needs a non-empty batch".into()));
    }
    let b = batch.len() as f64;
    let weights = config.weights(n, variant);
    let mut out = LossBundle {
        weights,
        rays: batch.len(),
        ..LossBundle::default()
    };
    for ray in batch {
        let pred = render_intensity(&ray.samples, i0);
        out.photometric += (pred - ray.target).powi(2) / b;
        if variant.has_dynamic_field() {
            out.factorization += factorization(&ray.samples) / b;
            match dynamic_entropy(&ray.samples, ray.vessel_likely, config.min_dynamic_depth) {
                Some(e) => out.entropy += e / b,
                None => out.entropy_skipped += 1,
            }
        }
        if variant == Variant::Full {
            out.occlusion += dynamic_occlusion(&ray.samples, config.occlusion_distance) / b;
        }
    }
    out.total = out.photometric
        + weights.factorization * out.factorization
        + weights.entropy * out.entropy
        + weights.occlusion * out.occlusion;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batched versions on the tape

/// Inputs for [`batch_loss_tape`]; all arrays are `rays x samples` except
/// `target` (`rays x 1`).
pub struct BatchLossInput<'a> {
    pub sigma_static: Var,
    pub sigma_dynamic: Option<Var>,
    pub dt: &'a Array2<f64>,
    /// 1 where a sample lies within the occlusion distance of the entry.
    pub near_mask: &'a Array2<f64>,
    pub target: &'a Array2<f64>,
    pub vessel_likely: &'a [bool],
}

/// Records the variant's objective for a chunk of rays. Every term is summed
/// over the chunk and divided by `batch_rays`, so chunk results add up to
/// batch means.
pub fn batch_loss_tape(
    tape: &mut Tape,
    input: &BatchLossInput<'_>,
    weights: LossWeights,
    variant: Variant,
    config: &LossConfig,
    i0: f64,
    batch_rays: usize,
) -> (Var, LossBundle) {
    let norm = 1.0 / batch_rays as f64;
    let (rays, samples) = input.dt.dim();
    let mut bundle = LossBundle {
        weights,
        rays,
        ..LossBundle::default()
    };

    let composite = match input.sigma_dynamic {
        Some(d) => tape.add(input.sigma_static, d),
        None => input.sigma_static,
    };
    let pred = render_intensity_tape(tape, composite, input.dt.clone(), i0);
    let target = tape.constant(input.target.clone());
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    let sse = tape.sum(sq);
    let mut total = tape.scale(sse, norm);
    bundle.photometric = tape.scalar(total);

    let Some(dynamic) = input.sigma_dynamic.filter(|_| variant.has_dynamic_field()) else {
        bundle.total = bundle.photometric;
        return (total, bundle);
    };

    // Factorization: binary entropy of the dynamic share, averaged per ray.
    if weights.factorization > 0.0 {
        let both = tape.add(dynamic, input.sigma_static);
        let denom = tape.add_scalar(both, EPS_RATIO);
        let share = tape.div(dynamic, denom);
        let w = tape.clamp(share, EPS_ENTROPY, 1.0 - EPS_ENTROPY);
        let lw = tape.ln(w);
        let a = tape.mul(w, lw);
        let neg = tape.scale(w, -1.0);
        let rest = tape.add_scalar(neg, 1.0);
        let lr = tape.ln(rest);
        let b = tape.mul(rest, lr);
        let ab = tape.add(a, b);
        let s = tape.sum(ab);
        let term = tape.scale(s, -norm / samples as f64);
        bundle.factorization = tape.scalar(term);
        let weighted = tape.scale(term, weights.factorization);
        total = tape.add(total, weighted);
    }

    // Entropy of the normalized dynamic ray density; some rays masked out.
    if weights.entropy > 0.0 {
        let dyn_depth = (tape.value(dynamic) * input.dt).sum_axis(Axis(1));
        let keep: Vec<f64> = dyn_depth
            .iter()
            .zip(input.vessel_likely)
            .map(|(d, likely)| if *likely || *d >= config.min_dynamic_depth { 1.0 } else { 0.0 })
            .collect();
        bundle.entropy_skipped = keep.iter().filter(|k| **k == 0.0).count();
        if bundle.entropy_skipped < rays {
            let row_sum = tape.sum_cols(dynamic);
            let row_sum = tape.add_scalar(row_sum, EPS_PROB);
            let row_sum = tape.repeat_cols(row_sum, samples);
            let p = tape.div(dynamic, row_sum);
            let pc = tape.clamp(p, EPS_PROB, 1.0);
            let lp = tape.ln(pc);
            let plp = tape.mul(p, lp);
            let per_ray = tape.sum_cols(plp);
            let mask = Array2::from_shape_vec((rays, 1), keep).unwrap();
            let kept = tape.mul_const(per_ray, mask);
            let s = tape.sum(kept);
            let term = tape.scale(s, -norm);
            bundle.entropy = tape.scalar(term);
            let weighted = tape.scale(term, weights.entropy);
            total = tape.add(total, weighted);
        }
    } else if variant.has_dynamic_field() {
        // Weight zero: still report the term's value for logging.
        let d = tape.value(dynamic);
        for (r, likely) in input.vessel_likely.iter().enumerate() {
            let row = d.row(r);
            let depth: f64 = row.iter().zip(input.dt.row(r)).map(|(s, t)| s * t).sum();
            if !likely && depth < config.min_dynamic_depth {
                bundle.entropy_skipped += 1;
                continue;
            }
            let tot: f64 = row.sum() + EPS_PROB;
            bundle.entropy -= norm * row.iter().map(|s| (s / tot) * (s / tot).clamp(EPS_PROB, 1.0).ln()).sum::<f64>();
        }
    }

    if weights.occlusion > 0.0 && variant == Variant::Full {
        let m = input.near_mask * input.dt;
        let near = tape.mul_const(dynamic, m);
        let s = tape.sum(near);
        let term = tape.scale(s, norm);
        bundle.occlusion = tape.scalar(term);
        let weighted = tape.scale(term, weights.occlusion);
        total = tape.add(total, weighted);
    }

    bundle.total = tape.scalar(total);
    (total, bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{ParamId, ParamRole, ParamStore};
    use crate::renderer::RaySamples;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn uniform_set(sig_s: Vec<f64>, sig_d: Vec<f64>, length: f64) -> RaySampleSet {
        let n = sig_s.len();
        let dt = length / n as f64;
        let samples = RaySamples {
            t: (0..n).map(|k| (k as f64 + 0.5) * dt).collect(),
            dt: vec![dt; n],
        };
        RaySampleSet::new(0.0, samples, sig_s, sig_d).unwrap()
    }

    #[test]
    fn photometric_values() {
        assert_eq!(photometric(&[0.4, 0.9], &[0.4, 0.9]), 0.0);
        assert!((photometric(&[0.8], &[0.5]) - 0.09).abs() < 1e-15);
        let p = [0.1, 0.5, 0.7];
        let t = [0.2, 0.2, 0.9];
        let per: Vec<f64> = (0..3).map(|k| photometric(&p[k..k + 1], &t[k..k + 1])).collect();
        assert!((photometric(&p, &t) - per.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn factorization_limits() {
        let pure_static = uniform_set(vec![0.7; 8], vec![0.0; 8], 1.0);
        assert!(factorization(&pure_static) <= binary_entropy(EPS_ENTROPY) + 1e-15);
        let mixed = uniform_set(vec![0.4; 8], vec![0.4; 8], 1.0);
        assert!((factorization(&mixed) - LN_2).abs() < 1e-9);
    }

    #[test]
    fn factorization_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
        let d: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
        let set = uniform_set(s.clone(), d.clone(), 1.0);
        let mut direct = 0.0;
        for k in 0..30 {
            let w: f64 = (d[k] / (d[k] + s[k] + 1e-10)).clamp(1e-7, 1.0 - 1e-7);
            direct += -(w * w.ln() + (1.0 - w) * (1.0 - w).ln());
        }
        assert!((factorization(&set) - direct / 30.0).abs() < 1e-14);
    }

    #[test]
    fn entropy_limits_and_skipping() {
        let mut one_hot = vec![0.0; 50];
        one_hot[17] = 2.0;
        let s = uniform_set(vec![0.1; 50], one_hot, 1.0);
        assert!(dynamic_entropy(&s, false, 1e-4).unwrap().abs() < 1e-9);

        let s = uniform_set(vec![0.1; 50], vec![0.3; 50], 1.0);
        assert!((dynamic_entropy(&s, false, 1e-4).unwrap() - 50f64.ln()).abs() < 1e-9);

        // Dynamic optical depth 5e-5 over a unit ray.
        let faint = uniform_set(vec![0.1; 10], vec![5e-5; 10], 1.0);
        assert_eq!(dynamic_entropy(&faint, false, 1e-4), None);
        assert!(dynamic_entropy(&faint, true, 1e-4).is_some());
        let batch = vec![LossRay {
            samples: faint,
            target: 0.9,
            vessel_likely: false,
        }];
        let b = full_loss(&batch, 0, Variant::Full, &LossConfig::default(), 1.0).unwrap();
        assert_eq!(b.entropy, 0.0);
        assert_eq!(b.entropy_skipped, 1);
    }

    #[test]
    fn occlusion_cases() {
        // Dynamic density only beyond D.
        let mut d = vec![0.0; 20];
        for v in d.iter_mut().skip(5) {
            *v = 1.0;
        }
        let s = uniform_set(vec![0.2; 20], d, 1.0);
        assert_eq!(dynamic_occlusion(&s, 0.2), 0.0);
        // Constant density: mask covers 0.2 / 1.6 of the ray.
        let s = uniform_set(vec![0.0; 160], vec![0.5; 160], 1.6);
        assert!((dynamic_occlusion(&s, 0.2) - 0.5 * 0.2).abs() < 1e-12);
        assert_eq!(LossConfig::default().occlusion_distance, 0.2);
    }

    #[test]
    fn schedules_reproduce_reported_values() {
        let c = LossConfig::default();
        assert_eq!(c.factorization.value(0), 1e-12);
        assert_eq!(c.factorization.value(40_000), 1e-12);
        assert_eq!(c.factorization.value(150_000), 1e-10);
        assert_eq!(c.occlusion.value(40_000), 1e-8);
        assert_eq!(c.occlusion.value(150_000), 1e-5);
        assert_eq!(c.entropy.value(0), 1e-12);
        assert!(c.entropy.value(1) > 1e-12);
        assert_eq!(c.entropy.value(150_000), 1e-10);
        let s = c.scaled(0.05);
        assert_eq!(s.factorization.delay, 2000);
        assert_eq!(s.factorization.value(7500), 1e-10);
    }

    #[test]
    fn variants_select_terms() {
        let c = LossConfig::default();
        let w = c.weights(100_000, Variant::Dynamic);
        assert_eq!(w.occlusion, 0.0);
        assert!(w.factorization > 0.0 && w.entropy > 0.0);
        assert_eq!(c.weights(100_000, Variant::Sparse), LossWeights::default());
        assert!(c.weights(100_000, Variant::Full).occlusion > 0.0);
        assert_eq!("sparse".parse::<Variant>().unwrap(), Variant::Sparse);
        assert!("bogus".parse::<Variant>().is_err());
    }

    /// Random batch for comparing tape and plain code paths.
    struct Fixture {
        sig_s: Array2<f64>,
        sig_d: Array2<f64>,
        dt: Array2<f64>,
        near: Array2<f64>,
        t: Array2<f64>,
        target: Array2<f64>,
        likely: Vec<bool>,
    }

    fn fixture(rays: usize, samples: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let length: Vec<f64> = (0..rays).map(|_| rng.gen_range(0.8..2.0)).collect();
        let dt = Array2::from_shape_fn((rays, samples), |(r, _)| length[r] / samples as f64);
        let t = Array2::from_shape_fn((rays, samples), |(r, k)| (k as f64 + 0.5) * dt[[r, k]]);
        let near = t.mapv(|v| if v < 0.2 { 1.0 } else { 0.0 });
        let sig_s = Array2::from_shape_fn((rays, samples), |_| rng.gen_range(0.0..1.0));
        let mut sig_d = Array2::from_shape_fn((rays, samples), |_| rng.gen_range(0.0..0.5));
        // One ray nearly empty so the entropy mask is exercised.
        sig_d.row_mut(0).fill(1e-7);
        let target = Array2::from_shape_fn((rays, 1), |_| rng.gen_range(0.2..0.9));
        let likely = (0..rays).map(|r| r % 3 == 2).collect();
        Fixture {
            sig_s,
            sig_d,
            dt,
            near,
            t,
            target,
            likely,
        }
    }

    fn plain_batch(f: &Fixture) -> Vec<LossRay> {
        (0..f.dt.nrows())
            .map(|r| LossRay {
                samples: RaySampleSet::new(
                    0.0,
                    RaySamples {
                        t: f.t.row(r).to_vec(),
                        dt: f.dt.row(r).to_vec(),
                    },
                    f.sig_s.row(r).to_vec(),
                    f.sig_d.row(r).to_vec(),
                )
                .unwrap(),
                target: f.target[[r, 0]],
                vessel_likely: f.likely[r],
            })
            .collect()
    }

    fn tape_loss(store: &ParamStore, ids: (ParamId, ParamId), f: &Fixture, w: LossWeights, variant: Variant) -> (Tape, Var, LossBundle) {
        let mut tape = Tape::new();
        let s = tape.param(store, ids.0);
        let d = tape.param(store, ids.1);
        let input = BatchLossInput {
            sigma_static: s,
            sigma_dynamic: Some(d),
            dt: &f.dt,
            near_mask: &f.near,
            target: &f.target,
            vessel_likely: &f.likely,
        };
        let (v, b) = batch_loss_tape(&mut tape, &input, w, variant, &LossConfig::default(), 1.0, f.dt.nrows());
        (tape, v, b)
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let f = fixture(6, 16, 3);
        let mut store = ParamStore::default();
        let ids = (
            store.add("s", ParamRole::StaticNet, f.sig_s.clone()),
            store.add("d", ParamRole::DynamicNet, f.sig_d.clone()),
        );
        let cfg = LossConfig::default();
        for (n, variant) in [(0, Variant::Full), (90_000, Variant::Full), (90_000, Variant::Dynamic)] {
            let plain = full_loss(&plain_batch(&f), n, variant, &cfg, 1.0).unwrap();
            let (_, _, b) = tape_loss(&store, ids, &f, cfg.weights(n, variant), variant);
            for (a, e) in [
                (b.photometric, plain.photometric),
                (b.factorization, plain.factorization),
                (b.entropy, plain.entropy),
                (b.occlusion, plain.occlusion),
                (b.total, plain.total),
            ] {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
            }
            assert_eq!(b.entropy_skipped, plain.entropy_skipped);
            assert_eq!(b.entropy_skipped, 1);
        }
    }

    /// Gradient of the photometric term plus one other term at unit weight,
    /// checked against central differences of the plain implementation.
    #[test]
    fn term_gradients_match_finite_differences() {
        let f = fixture(4, 10, 5);
        let mut store = ParamStore::default();
        let ids = (
            store.add("s", ParamRole::StaticNet, f.sig_s.clone() + 0.05),
            store.add("d", ParamRole::DynamicNet, f.sig_d.clone() + 0.05),
        );
        let one_hot = |k: usize| {
            let mut w = LossWeights::default();
            match k {
                1 => w.factorization = 1.0,
                2 => w.entropy = 1.0,
                3 => w.occlusion = 1.0,
                _ => {}
            }
            w
        };
        for term in 0..4 {
            let w = one_hot(term);
            let (tape, obj, _) = tape_loss(&store, ids, &f, w, Variant::Full);
            let grads = tape.backward(obj).unwrap();
            let eval = |store: &ParamStore| -> f64 {
                let mut g = fixture(4, 10, 5);
                g.sig_s = store.get(ids.0).value.clone();
                g.sig_d = store.get(ids.1).value.clone();
                let plain = full_loss(&plain_batch(&g), 0, Variant::Full, &LossConfig::default(), 1.0).unwrap();
                plain.photometric
                    + match term {
                        0 => 0.0,
                        1 => plain.factorization,
                        2 => plain.entropy,
                        _ => plain.occlusion,
                    }
            };
            let h = 1e-6;
            for id in [ids.0, ids.1] {
                let g = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(f.dt.dim()));
                for r in 0..4 {
                    for c in 0..10 {
                        let orig = store.get(id).value[[r, c]];
                        store.get_mut(id).value[[r, c]] = orig + h;
                        let fp = eval(&store);
                        store.get_mut(id).value[[r, c]] = orig - h;
                        let fm = eval(&store);
                        store.get_mut(id).value[[r, c]] = orig;
                        let fd = (fp - fm) / (2.0 * h);
                        let an = g[[r, c]];
                        let err = (an - fd).abs() / fd.abs().max(1e-3);
                        assert!(err < 1e-4, "term {term} {id:?}[{r},{c}]: {an} vs {fd}");
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn terms_non_negative_and_bounded(s in proptest::collection::vec(0.0f64..3.0, 2..60),
                                              d in proptest::collection::vec(0.0f64..3.0, 60)) {
                let n = s.len();
                let set = uniform_set(s, d[..n].to_vec(), 1.3);
                let fac = factorization(&set);
                prop_assert!((0.0..=LN_2 + 1e-12).contains(&fac));
                if let Some(e) = dynamic_entropy(&set, true, 1e-4) {
                    prop_assert!(e >= -1e-12 && e <= (n as f64).ln() + 1e-9);
                }
                prop_assert!(dynamic_occlusion(&set, 0.2) >= 0.0);
            }
        }
    }
}
