//! Evaluation of trained models against the phantom ground truth: MIP-based
//! Dice on the vessel channel, PSNR and SSIM of the composite projection,
//! per-phase summaries and the ablation runner.

mod ablation;
mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use ndarray_npy::write_npy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationCell, AblationReport, AblationSuite, GRID_ENTROPY, GRID_OCCLUSION};
pub use metrics::{dice, mse, psnr, ssim, PSNR_CAP};

use crate::dataset::{render_optical_depth, AngiogramDataset, ViewRole};
use crate::error::{Error, Result};
use crate::geometry::{ray_through, CameraPose};
use crate::losses::Variant;
use crate::phantom::Phantom;
use crate::renderer::intensity_from_depth;
use crate::trainer::{midpoint_points, FieldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MipChannel {
    /// Vessel channel sigma_d.
    Dynamic,
    /// sigma_s + sigma_d, used for models without a vessel channel.
    Composite,
}

impl MipChannel {
    pub fn for_variant(variant: Variant) -> Self {
        if variant.has_dynamic_field() {
            MipChannel::Dynamic
        } else {
            MipChannel::Composite
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Midpoint samples per ray when querying the model.
    pub samples_per_ray: usize,
    /// Ground-truth vessel pixels: vessel-only optical depth above this.
    pub vessel_depth_threshold: f64,
    /// Predicted vessel pixels: MIP above this fraction of the phantom's
    /// vessel attenuation.
    pub mip_threshold_fraction: f64,
    /// Which views to score.
    pub role: ViewRole,
    /// Keep rendered images in the report.
    pub keep_images: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 128,
            vessel_depth_threshold: 1e-3,
            mip_threshold_fraction: 0.5,
            role: ViewRole::Validation,
            keep_images: false,
        }
    }
}

/// Model projections of one view at one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelImages {
    pub static_intensity: Array2<f64>,
    pub dynamic_intensity: Array2<f64>,
    pub composite_intensity: Array2<f64>,
    pub mip_dynamic: Array2<f64>,
    pub mip_composite: Array2<f64>,
}

impl ChannelImages {
    pub fn mip(&self, channel: MipChannel) -> &Array2<f64> {
        match channel {
            MipChannel::Dynamic => &self.mip_dynamic,
            MipChannel::Composite => &self.mip_composite,
        }
    }
}

/// Renders every channel of `model` (encoded as at iteration `n`) from
/// `pose` at `phase`.
pub fn render_model_view(
    model: &FieldModel,
    n: u64,
    pose: &CameraPose,
    phase: usize,
    samples: usize,
    i0: f64,
) -> Result<ChannelImages> {
    if samples < 2 {
        return Err(Error::Argument("need at least 2 samples per ray".into()));
    }
    let (w, h) = (pose.detector_width, pose.detector_height);
    let rows: Vec<Result<Vec<[f64; 4]>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut points = Vec::with_capacity(w * samples);
            let mut steps = Vec::with_capacity(w);
            for u in 0..w {
                match ray_through(pose, u as f64, v as f64) {
                    Ok(ray) => {
                        let (p, step) = midpoint_points(&ray, samples);
                        points.extend(p);
                        steps.push(step);
                    }
                    Err(_) => steps.push(0.0),
                }
            }
            let q = if points.is_empty() {
                None
            } else {
                Some(model.query(&points, phase, n)?)
            };
            let mut out = Vec::with_capacity(w);
            let mut offset = 0;
            for step in steps {
                if step == 0.0 {
                    out.push([0.0; 4]);
                    continue;
                }
                let q = q.as_ref().unwrap();
                let s = q.sigma_static.slice(ndarray::s![offset..offset + samples]);
                let d = q.sigma_dynamic.slice(ndarray::s![offset..offset + samples]);
                offset += samples;
                let mut mip_d = 0.0f64;
                let mut mip_c = 0.0f64;
                for (a, b) in s.iter().zip(d) {
                    mip_d = mip_d.max(*b);
                    mip_c = mip_c.max(a + b);
                }
                out.push([s.sum() * step, d.sum() * step, mip_d, mip_c]);
            }
            Ok(out)
        })
        .collect();
    let mut images = ChannelImages {
        static_intensity: Array2::zeros((h, w)),
        dynamic_intensity: Array2::zeros((h, w)),
        composite_intensity: Array2::zeros((h, w)),
        mip_dynamic: Array2::zeros((h, w)),
        mip_composite: Array2::zeros((h, w)),
    };
    for (v, row) in rows.into_iter().enumerate() {
        for (u, [ds, dd, md, mc]) in row?.into_iter().enumerate() {
            images.static_intensity[[v, u]] = intensity_from_depth(ds, i0);
            images.dynamic_intensity[[v, u]] = intensity_from_depth(dd, i0);
            images.composite_intensity[[v, u]] = intensity_from_depth(ds + dd, i0);
            images.mip_dynamic[[v, u]] = md;
            images.mip_composite[[v, u]] = mc;
        }
    }
    Ok(images)
}

/// 8-bit binary PGM, linearly mapping `[lo, hi]` to `[0, 255]`.
pub fn write_pgm(path: &Path, img: &Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = img.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    bytes.extend(img.iter().map(|x| (((x - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes each channel as `<name>.npy` plus a `<name>.pgm` preview and
/// returns the written paths.
pub fn save_channel_images(dir: &Path, images: &ChannelImages, i0: f64) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, img, intensity) in [
        ("static", &images.static_intensity, true),
        ("dynamic", &images.dynamic_intensity, true),
        ("composite", &images.composite_intensity, true),
        ("mip_dynamic", &images.mip_dynamic, false),
        ("mip_composite", &images.mip_composite, false),
    ] {
        let p = dir.join(format!("{name}.npy"));
        write_npy(&p, img).map_err(|e| Error::format(&p, e.to_string()))?;
        written.push(p);
        let hi = if intensity { i0 } else { img.iter().copied().fold(0.0, f64::max) };
        let p = dir.join(format!("{name}.pgm"));
        write_pgm(&p, img, 0.0, hi)?;
        written.push(p);
    }
    Ok(written)
}

/// Per-pixel maximum of the chosen channel along each ray.
pub fn mip_project(
    model: &FieldModel,
    n: u64,
    pose: &CameraPose,
    phase: usize,
    samples: usize,
    channel: MipChannel,
) -> Result<Array2<f64>> {
    let mut images = render_model_view(model, n, pose, phase, samples, 1.0)?;
    Ok(match channel {
        MipChannel::Dynamic => std::mem::take(&mut images.mip_dynamic),
        MipChannel::Composite => std::mem::take(&mut images.mip_composite),
    })
}

/// Binary vessel mask from a MIP image, shared by every method.
pub fn threshold_mip(mip: &Array2<f64>, threshold: f64) -> Array2<bool> {
    mip.mapv(|x| x > threshold)
}

/// Ground-truth vessel pixels of `pose` at `phase`.
pub fn ground_truth_vessel_mask(phantom: &Phantom, pose: &CameraPose, phase: usize, samples: usize, threshold: f64) -> Result<Array2<bool>> {
    Ok(render_optical_depth(pose, &phantom.vessel_field(), phase, samples)?.mapv(|d| d > threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub view: usize,
    pub phase: usize,
    pub dice: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellImages {
    pub view: usize,
    pub phase: usize,
    pub channels: ChannelImages,
    pub ground_truth: Array2<f64>,
    pub truth_mask: Array2<bool>,
    pub predicted_mask: Array2<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub iteration: u64,
    pub cells: Vec<EvalCell>,
    /// Mean Dice over views, per phase `1..=T`.
    pub per_phase_dice: Vec<f64>,
    pub mean_dice: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub images: Vec<CellImages>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    mean(v.iter().map(|x| (x - m).powi(2))).sqrt()
}

impl EvalReport {
    pub fn per_phase_dice_std(&self) -> f64 {
        std_dev(&self.per_phase_dice)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("view,phase,dice,psnr,ssim\n");
        for c in &self.cells {
            writeln!(s, "{},{},{},{},{}", c.view, c.phase, c.dice, c.psnr, c.ssim).unwrap();
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# Evaluation: {} variant at iteration {}\n", self.variant.name(), self.iteration).unwrap();
        writeln!(s, "| metric | value |\n|---|---|").unwrap();
        writeln!(s, "| mean Dice | {:.4} |", self.mean_dice).unwrap();
        writeln!(s, "| per-phase Dice std | {:.4} |", self.per_phase_dice_std()).unwrap();
        writeln!(s, "| mean PSNR (dB) | {:.2} |", self.mean_psnr).unwrap();
        writeln!(s, "| mean SSIM | {:.4} |\n", self.mean_ssim).unwrap();
        writeln!(s, "## Dice per phase\n\n| phase | Dice |\n|---|---|").unwrap();
        for (i, d) in self.per_phase_dice.iter().enumerate() {
            writeln!(s, "| {} | {:.4} |", i + 1, d).unwrap();
        }
        writeln!(s, "\n## Cells\n\n| view | phase | Dice | PSNR | SSIM |\n|---|---|---|---|---|").unwrap();
        for c in &self.cells {
            writeln!(s, "| {} | {} | {:.4} | {:.2} | {:.4} |", c.view, c.phase, c.dice, c.psnr, c.ssim).unwrap();
        }
        s
    }

    /// Writes `metrics.csv`, `report.md` and, when kept, the images.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("metrics.csv");
        fs::write(&p, self.csv()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("report.md");
        fs::write(&p, self.markdown()).map_err(|e| Error::io(&p, e))?;
        if !self.images.is_empty() {
            let img_dir = dir.join("images");
            fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            for c in &self.images {
                let stem = format!("view{:02}_phase{:02}", c.view, c.phase);
                let f = |name: &str| img_dir.join(format!("{stem}_{name}.npy"));
                let ch = &c.channels;
                for (name, img) in [
                    ("static", &ch.static_intensity),
                    ("dynamic", &ch.dynamic_intensity),
                    ("composite", &ch.composite_intensity),
                    ("mip", ch.mip(MipChannel::for_variant(self.variant))),
                    ("ground_truth", &c.ground_truth),
                ] {
                    let p = f(name);
                    write_npy(&p, img).map_err(|e| Error::format(&p, e.to_string()))?;
                }
                for (name, m) in [("truth_mask", &c.truth_mask), ("predicted_mask", &c.predicted_mask)] {
                    let p = f(name);
                    write_npy(&p, m).map_err(|e| Error::format(&p, e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

/// Scores `model` on every view of the configured role at every phase.
pub fn evaluate(model: &FieldModel, n: u64, dataset: &AngiogramDataset, config: &EvalConfig) -> Result<EvalReport> {
    let phantom = Phantom::new(&dataset.config.phantom)?;
    let threshold = config.mip_threshold_fraction * phantom.vessels.config.attenuation;
    let channel = MipChannel::for_variant(model.variant);
    let i0 = dataset.source_intensity();
    let views: Vec<usize> = dataset.views_with_role(config.role).map(|v| v.id).collect();
    if views.is_empty() {
        return Err(Error::Argument("dataset has no views to evaluate".into()));
    }
    let t = dataset.phases();
    let mut cells = Vec::new();
    let mut images = Vec::new();
    for &view in &views {
        for phase in 1..=t {
            let frame = dataset.frame(view, phase);
            let ch = render_model_view(model, n, &frame.pose, phase, config.samples_per_ray, i0)?;
            let truth = ground_truth_vessel_mask(
                &phantom,
                &frame.pose,
                phase,
                dataset.config.samples_per_ray,
                config.vessel_depth_threshold,
            )?;
            let pred = threshold_mip(ch.mip(channel), threshold);
            cells.push(EvalCell {
                view,
                phase,
                dice: dice(&pred, &truth)?,
                psnr: psnr(&ch.composite_intensity, &frame.image, i0)?,
                ssim: ssim(&ch.composite_intensity, &frame.image, i0)?,
            });
            if config.keep_images {
                images.push(CellImages {
                    view,
                    phase,
                    channels: ch,
                    ground_truth: frame.image.clone(),
                    truth_mask: truth,
                    predicted_mask: pred,
                });
            }
        }
    }
    let per_phase_dice = (1..=t)
        .map(|i| mean(cells.iter().filter(|c| c.phase == i).map(|c| c.dice)))
        .collect();
    Ok(EvalReport {
        variant: model.variant,
        iteration: n,
        mean_dice: mean(cells.iter().map(|c| c.dice)),
        mean_psnr: mean(cells.iter().map(|c| c.psnr)),
        mean_ssim: mean(cells.iter().map(|c| c.ssim)),
        per_phase_dice,
        cells,
        images,
    })
}
