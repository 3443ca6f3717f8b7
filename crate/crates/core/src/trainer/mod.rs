//! Training loop for the three variants: weighted pixel sampling, batched
//! rendering and loss evaluation on a tape, Adam updates, checkpoints and a
//! per-iteration loss log.

mod checkpoint;
mod model;
mod sampler;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_name, latest_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{FieldModel, FieldSamples, ModelConfig};
pub use sampler::{BatchRay, PixelSampler};

use crate::dataset::AngiogramDataset;
use crate::diffnet::{Adam, Gradients, LrSchedule, Tape};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::losses::{batch_loss_tape, scale_iterations, BatchLossInput, LossBundle, LossConfig, Variant};

/// Run configuration. Iteration counts are given at reference scale and
/// multiplied by `scale` when used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Training iterations before scaling.
    pub iterations: u64,
    /// Multiplies iterations, encoding window N, loss delays and ramps and
    /// the learning-rate horizon.
    pub scale: f64,
    /// Rays per batch.
    pub batch_rays: usize,
    /// Quadrature samples per ray (S).
    pub samples_per_ray: usize,
    /// Fraction of each batch drawn from high-variance pixels (V).
    pub weighted_fraction: f64,
    pub seed: u64,
    /// Checkpoint interval in (scaled) iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Rays per work unit; gradients are summed over units in a fixed order.
    pub chunk_rays: usize,
    /// Source intensity I0 used for rendering predictions.
    pub source_intensity: f64,
    pub model: ModelConfig,
    /// gamma: L bands, window N, start band.
    pub encoding: EncodingConfig,
    /// lambda_b, lambda_e, lambda_o and D.
    pub losses: LossConfig,
    /// Multiplies lambda_b, lambda_e and lambda_o. The reference weights
    /// are far below the size of our per-ray mean losses on unit-intensity
    /// images, so at desk scale they barely act without it.
    pub regularizer_gain: f64,
    pub learning_rate: LrSchedule,
}

impl Default for TrainConfig {
    /// Desk-scale setup: 64x64 detectors, 10000 iterations.
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            iterations: 200_000,
            scale: 0.05,
            batch_rays: 128,
            samples_per_ray: 96,
            weighted_fraction: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            chunk_rays: 32,
            source_intensity: 1.0,
            model: ModelConfig::default(),
            encoding: EncodingConfig::default(),
            losses: LossConfig::default(),
            regularizer_gain: 1e6,
            // A tenth of the reference floor: the short schedule would
            // otherwise spend its last third barely moving.
            learning_rate: LrSchedule {
                end: 1e-4,
                ..LrSchedule::default()
            },
        }
    }
}

/// Horizons after applying the scale factor.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedSchedule {
    pub iterations: u64,
    pub encoding: EncodingConfig,
    pub losses: LossConfig,
    pub learning_rate: LrSchedule,
}

impl TrainConfig {
    /// Full-size setup: 4x128 networks, 1024 rays of 500 samples, 200000
    /// iterations.
    pub fn reference() -> Self {
        Self {
            scale: 1.0,
            batch_rays: 1024,
            samples_per_ray: 500,
            checkpoint_every: 10_000,
            model: ModelConfig::reference(),
            regularizer_gain: 1.0,
            learning_rate: LrSchedule::default(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_rays < 1 {
            return Err(Error::Config("batch_rays must be at least 1".into()));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.weighted_fraction) {
            return Err(Error::Config("weighted_fraction must lie in [0, 1]".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("scale must be positive".into()));
        }
        if self.chunk_rays < 1 {
            return Err(Error::Config("chunk_rays must be at least 1".into()));
        }
        if !(self.source_intensity > 0.0) {
            return Err(Error::Config("source_intensity must be positive".into()));
        }
        let lr = &self.learning_rate;
        if !(lr.start > 0.0 && lr.end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.model.validate()?;
        self.encoding.validate()?;
        self.losses.validate()?;
        if !(self.regularizer_gain >= 0.0 && self.regularizer_gain.is_finite()) {
            return Err(Error::Config("regularizer_gain must be finite and non-negative".into()));
        }
        if scale_iterations(self.encoding.window_iterations, self.scale) == 0 {
            return Err(Error::Config("encoding window vanishes at this scale".into()));
        }
        Ok(())
    }

    pub fn resolved(&self) -> ResolvedSchedule {
        ResolvedSchedule {
            iterations: scale_iterations(self.iterations, self.scale),
            encoding: EncodingConfig {
                window_iterations: scale_iterations(self.encoding.window_iterations, self.scale).max(1),
                ..self.encoding.clone()
            },
            losses: self.losses.scaled(self.scale).amplified(self.regularizer_gain),
            learning_rate: LrSchedule {
                decay_steps: scale_iterations(self.learning_rate.decay_steps, self.scale),
                ..self.learning_rate
            },
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub model: FieldModel,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub learning_rate: f64,
    pub bundle: LossBundle,
}

pub const LOSS_CSV_HEADER: &str = "n,lr,L_p,L_b,L_e,L_o,lambda_b,lambda_e,lambda_o,total,entropy_skipped";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let b = &self.bundle;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.learning_rate,
            b.photometric,
            b.factorization,
            b.entropy,
            b.occlusion,
            b.weights.factorization,
            b.weights.entropy,
            b.weights.occlusion,
            b.total,
            b.entropy_skipped
        )
    }
}

/// A dataset bound to a configuration, ready to take steps.
pub struct Trainer<'a> {
    pub dataset: &'a AngiogramDataset,
    pub config: TrainConfig,
    pub schedule: ResolvedSchedule,
    pub sampler: PixelSampler,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a AngiogramDataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let views = dataset.training_view_ids();
        Ok(Self {
            dataset,
            config: config.clone(),
            schedule: config.resolved(),
            sampler: PixelSampler::new(dataset, &views)?,
        })
    }

    pub fn init_state(&self) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let model = FieldModel::new(
            self.config.variant,
            self.dataset.phases(),
            &self.config.model,
            &self.schedule.encoding,
            &mut rng,
        );
        let optimizer = Adam::new(&model.store);
        TrainState {
            iteration: 0,
            model,
            optimizer,
            rng,
        }
    }

    pub fn sample_batch(&self, rng: &mut impl Rng) -> Vec<BatchRay> {
        self.sampler
            .sample_batch(self.dataset, self.config.batch_rays, self.config.weighted_fraction, rng)
    }

    /// Samples a batch and applies one update.
    pub fn step(&self, state: &mut TrainState) -> Result<LossRecord> {
        let batch = self.sample_batch(&mut state.rng);
        self.train_step(state, &batch)
    }

    /// Renders `batch` at the current iteration, evaluates the variant's
    /// loss and takes one Adam step.
    pub fn train_step(&self, state: &mut TrainState, batch: &[BatchRay]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let n = state.iteration;
        let s = self.config.samples_per_ray;
        let variant = self.config.variant;
        let weights = self.schedule.losses.weights(n, variant);
        let lr = self.schedule.learning_rate.at(n);

        // Jitter for every sample of every ray, drawn in batch order.
        let jitter: Vec<f64> = (0..batch.len() * s).map(|_| state.rng.gen::<f64>()).collect();

        let order: Vec<usize> = if variant == Variant::Sparse {
            let mut idx: Vec<usize> = (0..batch.len()).collect();
            idx.sort_by_key(|&k| batch[k].phase);
            idx
        } else {
            (0..batch.len()).collect()
        };
        let mut chunks: Vec<Vec<usize>> = Vec::new();
        let per_phase = variant == Variant::Sparse;
        for k in order {
            let fits = chunks.last().is_some_and(|c: &Vec<usize>| {
                c.len() < self.config.chunk_rays && (!per_phase || batch[c[0]].phase == batch[k].phase)
            });
            if fits {
                chunks.last_mut().unwrap().push(k);
            } else {
                chunks.push(vec![k]);
            }
        }

        let model = &state.model;
        let results: Vec<Result<(Gradients, LossBundle)>> = chunks
            .par_iter()
            .map(|c| self.chunk_pass(model, batch, c, &jitter, n, weights, batch.len()))
            .collect();

        state.model.store.zero_grad();
        let mut bundle = LossBundle::default();
        for r in results {
            let (g, b) = r?;
            g.accumulate_into(&mut state.model.store);
            bundle.absorb(&b);
        }
        bundle.weights = weights;
        state.optimizer.step(&mut state.model.store, lr)?;
        state.iteration += 1;
        Ok(LossRecord {
            iteration: n,
            learning_rate: lr,
            bundle,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn chunk_pass(
        &self,
        model: &FieldModel,
        batch: &[BatchRay],
        members: &[usize],
        jitter: &[f64],
        n: u64,
        weights: crate::losses::LossWeights,
        batch_total: usize,
    ) -> Result<(Gradients, LossBundle)> {
        let s = self.config.samples_per_ray;
        let r = members.len();
        let d_occ = self.schedule.losses.occlusion_distance;
        let mut points = Vec::with_capacity(r * s);
        let mut dt = Array2::zeros((r, s));
        let mut near = Array2::zeros((r, s));
        let mut target = Array2::zeros((r, 1));
        let mut phases = Vec::with_capacity(r);
        let mut likely = Vec::with_capacity(r);
        for (row, &k) in members.iter().enumerate() {
            let br = &batch[k];
            let ray = self.sampler.ray_for(br);
            let step = ray.length() / s as f64;
            for j in 0..s {
                let t = (j as f64 + jitter[k * s + j]) * step;
                points.push(ray.at(ray.t_near + t));
                dt[[row, j]] = step;
                near[[row, j]] = if t < d_occ { 1.0 } else { 0.0 };
            }
            target[[row, 0]] = br.target;
            phases.push(br.phase);
            likely.push(br.vessel_likely);
        }
        let mut tape = Tape::new();
        let (sig_s, sig_d) = model.record(&mut tape, &points, &phases, s, n)?;
        let input = BatchLossInput {
            sigma_static: sig_s,
            sigma_dynamic: sig_d,
            dt: &dt,
            near_mask: &near,
            target: &target,
            vessel_likely: &likely,
        };
        let (obj, bundle) = batch_loss_tape(
            &mut tape,
            &input,
            weights,
            self.config.variant,
            &self.schedule.losses,
            self.config.source_intensity,
            batch_total,
        );
        if !bundle.is_finite() {
            let rays: Vec<String> = members
                .iter()
                .map(|&k| {
                    let b = &batch[k];
                    format!("(view {}, u {}, v {}, phase {})", b.view, b.u, b.v, b.phase)
                })
                .collect();
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {n} ({bundle:?}) for rays {}",
                rays.join(", ")
            )));
        }
        Ok((tape.backward(obj)?, bundle))
    }
}

/// Where and how far [`run_training`] goes.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Checkpoints and `loss.csv` go here when set.
    pub out_dir: Option<&'a Path>,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<&'a Path>,
    /// Stop once this many iterations are complete.
    pub stop_after: Option<u64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Records of the iterations run by this call.
    pub log: Vec<LossRecord>,
}

/// Runs the configured number of (scaled) iterations.
pub fn run_training(dataset: &AngiogramDataset, config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    let trainer = Trainer::new(dataset, config)?;
    let mut state = match options.resume {
        Some(path) => {
            let (state, saved) = load_checkpoint(path)?;
            if &saved != config {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            if state.model.phases != dataset.phases() {
                return Err(Error::Config("checkpoint phase count differs from the dataset".into()));
            }
            state
        }
        None => trainer.init_state(),
    };
    let end = options
        .stop_after
        .map_or(trainer.schedule.iterations, |s| s.min(trainer.schedule.iterations));

    let mut csv = match options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_loss_log(&dir.join("loss.csv"), state.iteration)?)
        }
        None => None,
    };
    let mut log = Vec::new();
    while state.iteration < end {
        let rec = trainer.step(&mut state)?;
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(&*path, e))?;
        }
        log.push(rec);
        let every = config.checkpoint_every;
        if let Some(dir) = options.out_dir {
            if every > 0 && state.iteration % every == 0 && state.iteration < end {
                flush(&mut csv)?;
                save_checkpoint(&state, config, &dir.join(checkpoint_name(state.iteration)))?;
            }
        }
    }
    if let Some(dir) = options.out_dir {
        flush(&mut csv)?;
        save_checkpoint(&state, config, &dir.join(checkpoint_name(state.iteration)))?;
    }
    Ok(TrainOutcome { state, log })
}

type LossLog = (BufWriter<fs::File>, std::path::PathBuf);

fn flush(csv: &mut Option<LossLog>) -> Result<()> {
    if let Some((w, path)) = csv.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    Ok(())
}

/// Opens the loss log, keeping only rows before `from` when resuming.
fn open_loss_log(path: &Path, from: u64) -> Result<LossLog> {
    let mut kept = Vec::new();
    if from > 0 && path.exists() {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let n: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad loss row '{line}'")))?;
            if n < from {
                kept.push(line);
            }
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok((w, path.to_path_buf()))
}

/// Points `ray.at(t)` for midpoint samples, as used by evaluation.
pub fn midpoint_points(ray: &crate::geometry::Ray, samples: usize) -> (Vec<Vector3<f64>>, f64) {
    let step = ray.length() / samples as f64;
    let pts = (0..samples)
        .map(|j| ray.at(ray.t_near + (j as f64 + 0.5) * step))
        .collect();
    (pts, step)
}
