//! Synthetic angiogram sequences: ground-truth projection of a phantom,
//! per-view variance maps for weighted sampling, and on-disk persistence.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json                 views, poses, phases, I0, generation config
//! frames/view{v}_phase{i}.npy   f64 intensities, detector rows x columns
//! maps/view{v}_weights.npy      f64 sampling weights
//! maps/view{v}_mask.npy         bool high-variance mask
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use ndarray_npy::{read_npy, write_npy};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_view_plan, ray_through, CameraPose, ScannerConfig};
use crate::phantom::{DensityField, Phantom, PhantomConfig};
use crate::renderer::{intensity_from_depth, sample_ray};

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewRole {
    Training,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub id: usize,
    pub role: ViewRole,
    pub pose: CameraPose,
}

/// One detector image of one view at one cardiac phase.
#[derive(Clone, Debug, PartialEq)]
pub struct AngiogramFrame {
    pub view: usize,
    /// Cardiac phase in `1..=T`.
    pub phase: usize,
    /// Intensities indexed `[v, u]`.
    pub image: Array2<f64>,
    pub pose: CameraPose,
}

/// Per-view pixel sampling distribution derived from temporal variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub view: usize,
    /// Non-negative, sums to one.
    pub weights: Array2<f64>,
    pub high_variance_mask: Array2<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scanner: ScannerConfig,
    pub phantom: PhantomConfig,
    /// Number of training views; more than the configured optimal views
    /// draws them from the angle window.
    pub training_views: usize,
    /// Also render the held-out validation views.
    pub include_validation: bool,
    /// Source intensity I0.
    pub source_intensity: f64,
    /// Quadrature samples per ray for the ground truth, four times the
    /// desk training count.
    pub samples_per_ray: usize,
    /// Pixels above this quantile of temporal variance form the mask.
    pub mask_quantile: f64,
    /// Added to every pixel variance before normalization, as a fraction of
    /// the largest variance in the view.
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scanner: ScannerConfig::default(),
            phantom: PhantomConfig::default(),
            training_views: 4,
            include_validation: true,
            source_intensity: 1.0,
            samples_per_ray: 384,
            mask_quantile: 0.90,
            variance_floor: 1e-6,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scanner.validate()?;
        if self.training_views == 0 {
            return Err(Error::Config("training_views must be at least 1".into()));
        }
        if !(self.source_intensity > 0.0 && self.source_intensity.is_finite()) {
            return Err(Error::Config("source_intensity must be positive".into()));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.mask_quantile) {
            return Err(Error::Config("mask_quantile must lie in [0, 1)".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance_floor must be positive".into()));
        }
        if self.phantom.cardiac_phases < 2 {
            return Err(Error::Config("at least two cardiac phases are required".into()));
        }
        Ok(())
    }
}

/// Optical depth `sum sigma * dt` per pixel, midpoint quadrature.
pub fn render_optical_depth(pose: &CameraPose, field: &dyn DensityField, phase: usize, samples_per_ray: usize) -> Result<Array2<f64>> {
    if samples_per_ray < 2 {
        return Err(Error::Argument(format!("need at least 2 samples per ray, got {samples_per_ray}")));
    }
    let (w, h) = (pose.detector_width, pose.detector_height);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut sig = vec![0.0; samples_per_ray];
            (0..w)
                .map(|u| match ray_through(pose, u as f64, v as f64) {
                    Ok(ray) => {
                        let s = sample_ray::<ChaCha8Rng>(&ray, samples_per_ray, None).expect("count checked");
                        field.densities_along(&ray, &s.t, phase, &mut sig);
                        sig.iter().zip(&s.dt).map(|(a, b)| a * b).sum()
                    }
                    // Misses the scene box entirely.
                    Err(_) => 0.0,
                })
                .collect()
        })
        .collect();
    Ok(Array2::from_shape_vec((h, w), rows.concat()).expect("rows have detector width"))
}

/// Beer-Lambert projection of `field` at `phase`.
pub fn render_ground_truth(
    pose: &CameraPose,
    field: &dyn DensityField,
    phase: usize,
    samples_per_ray: usize,
    i0: f64,
) -> Result<Array2<f64>> {
    Ok(render_optical_depth(pose, field, phase, samples_per_ray)?.mapv(|d| intensity_from_depth(d, i0)))
}

/// Linear-interpolation quantile (`q` in `[0, 1]`) of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Population variance over frames, per pixel.
pub fn temporal_variance(images: &[&Array2<f64>]) -> Result<Array2<f64>> {
    if images.len() < 2 {
        return Err(Error::Argument("variance needs at least two frames".into()));
    }
    let dim = images[0].dim();
    if images.iter().any(|im| im.dim() != dim) {
        return Err(Error::Argument("frames differ in dimensions".into()));
    }
    let n = images.len() as f64;
    let mut mean = Array2::<f64>::zeros(dim);
    for im in images {
        mean += *im;
    }
    mean /= n;
    let mut var = Array2::<f64>::zeros(dim);
    for im in images {
        Zip::from(&mut var).and(*im).and(&mean).for_each(|v, &x, &m| *v += (x - m) * (x - m));
    }
    Ok(var / n)
}

/// Sampling weights proportional to `variance + floor * max variance`, and
/// the mask of pixels above the `mask_quantile` of variance.
pub fn variance_map(view: usize, images: &[&Array2<f64>], mask_quantile: f64, floor: f64) -> Result<ProbabilityMap> {
    let var = temporal_variance(images)?;
    let max = var.iter().copied().fold(0.0, f64::max);
    let shifted = if max > 0.0 {
        var.mapv(|v| v + floor * max)
    } else {
        Array2::ones(var.dim())
    };
    let total: f64 = shifted.sum();
    let weights = shifted / total;
    let threshold = quantile(var.as_slice().expect("standard layout"), mask_quantile);
    let high_variance_mask = var.mapv(|v| v > threshold);
    Ok(ProbabilityMap {
        view,
        weights,
        high_variance_mask,
    })
}

/// Frames of every view at every phase plus the per-view sampling maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AngiogramDataset {
    pub config: DatasetConfig,
    pub views: Vec<ViewRecord>,
    /// Ordered by view, then phase.
    pub frames: Vec<AngiogramFrame>,
    /// One per view, same order as `views`.
    pub maps: Vec<ProbabilityMap>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DatasetConfig,
    phases: usize,
    detector_width: usize,
    detector_height: usize,
    views: Vec<ViewRecord>,
    frames: Vec<FrameEntry>,
    maps: Vec<MapEntry>,
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    view: usize,
    phase: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct MapEntry {
    view: usize,
    weights: String,
    mask: String,
}

impl AngiogramDataset {
    /// Renders the phantom from every planned view at every phase.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let phantom = Phantom::new(&config.phantom)?;
        let plan = make_view_plan(config.training_views, &config.scanner, config.seed)?;
        let validation = if config.include_validation {
            plan.validation_poses
        } else {
            Vec::new()
        };
        let views: Vec<ViewRecord> = plan
            .training_poses
            .into_iter()
            .map(|pose| (ViewRole::Training, pose))
            .chain(validation.into_iter().map(|pose| (ViewRole::Validation, pose)))
            .enumerate()
            .map(|(id, (role, pose))| ViewRecord { id, role, pose })
            .collect();

        let phases = phantom.period();
        let field = phantom.composite_field();
        let cells: Vec<(usize, usize)> = (0..views.len())
            .flat_map(|v| (1..=phases).map(move |i| (v, i)))
            .collect();
        let frames = cells
            .par_iter()
            .map(|&(v, i)| {
                let pose = &views[v].pose;
                Ok(AngiogramFrame {
                    view: v,
                    phase: i,
                    image: render_ground_truth(pose, &field, i, config.samples_per_ray, config.source_intensity)?,
                    pose: pose.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dataset = Self {
            config: config.clone(),
            views,
            frames,
            maps: Vec::new(),
        };
        dataset.maps = (0..dataset.views.len())
            .map(|v| {
                let images: Vec<&Array2<f64>> = dataset.view_frames(v).map(|f| &f.image).collect();
                variance_map(v, &images, config.mask_quantile, config.variance_floor)
            })
            .collect::<Result<_>>()?;
        Ok(dataset)
    }

    pub fn phases(&self) -> usize {
        self.config.phantom.cardiac_phases
    }

    pub fn detector_size(&self) -> (usize, usize) {
        (self.config.scanner.detector_width, self.config.scanner.detector_height)
    }

    pub fn source_intensity(&self) -> f64 {
        self.config.source_intensity
    }

    pub fn frame(&self, view: usize, phase: usize) -> &AngiogramFrame {
        &self.frames[view * self.phases() + phase - 1]
    }

    pub fn view_frames(&self, view: usize) -> impl Iterator<Item = &AngiogramFrame> {
        let t = self.phases();
        self.frames[view * t..(view + 1) * t].iter()
    }

    pub fn views_with_role(&self, role: ViewRole) -> impl Iterator<Item = &ViewRecord> {
        self.views.iter().filter(move |v| v.role == role)
    }

    pub fn training_view_ids(&self) -> Vec<usize> {
        self.views_with_role(ViewRole::Training).map(|v| v.id).collect()
    }

    pub fn validation_view_ids(&self) -> Vec<usize> {
        self.views_with_role(ViewRole::Validation).map(|v| v.id).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["frames", "maps"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let (w, h) = self.detector_size();
        let mut manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            phases: self.phases(),
            detector_width: w,
            detector_height: h,
            views: self.views.clone(),
            frames: Vec::new(),
            maps: Vec::new(),
        };
        for f in &self.frames {
            let file = format!("frames/view{:02}_phase{:02}.npy", f.view, f.phase);
            let path = dir.join(&file);
            write_npy(&path, &f.image).map_err(|e| Error::format(&path, e.to_string()))?;
            manifest.frames.push(FrameEntry {
                view: f.view,
                phase: f.phase,
                file,
            });
        }
        for m in &self.maps {
            let entry = MapEntry {
                view: m.view,
                weights: format!("maps/view{:02}_weights.npy", m.view),
                mask: format!("maps/view{:02}_mask.npy", m.view),
            };
            let wp = dir.join(&entry.weights);
            write_npy(&wp, &m.weights).map_err(|e| Error::format(&wp, e.to_string()))?;
            let mp = dir.join(&entry.mask);
            write_npy(&mp, &m.high_variance_mask).map_err(|e| Error::format(&mp, e.to_string()))?;
            manifest.maps.push(entry);
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        let t = manifest.phases;
        let (w, h) = (manifest.detector_width, manifest.detector_height);
        if t != manifest.config.phantom.cardiac_phases || manifest.frames.len() != manifest.views.len() * t {
            return Err(Error::format(&path, "frame count does not match views x phases"));
        }
        if manifest.views.iter().enumerate().any(|(k, v)| v.id != k) {
            return Err(Error::format(&path, "view ids must be 0..n in order"));
        }
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for (k, entry) in manifest.frames.iter().enumerate() {
            if entry.view != k / t || entry.phase != k % t + 1 {
                return Err(Error::format(&path, format!("frame entry {} out of order", entry.file)));
            }
            let fp = dir.join(&entry.file);
            let image: Array2<f64> = read_array(&fp, (h, w))?;
            if image.iter().any(|x| !(*x > 0.0 && *x <= manifest.config.source_intensity)) {
                return Err(Error::format(&fp, "intensities outside (0, I0]"));
            }
            frames.push(AngiogramFrame {
                view: entry.view,
                phase: entry.phase,
                image,
                pose: manifest.views[entry.view].pose.clone(),
            });
        }
        if manifest.maps.len() != manifest.views.len() {
            return Err(Error::format(&path, "one probability map per view expected"));
        }
        let mut maps = Vec::with_capacity(manifest.maps.len());
        for (k, entry) in manifest.maps.iter().enumerate() {
            if entry.view != k {
                return Err(Error::format(&path, format!("map entry {} out of order", entry.weights)));
            }
            let weights: Array2<f64> = read_array(&dir.join(&entry.weights), (h, w))?;
            let mask: Array2<bool> = read_array(&dir.join(&entry.mask), (h, w))?;
            maps.push(ProbabilityMap {
                view: k,
                weights,
                high_variance_mask: mask,
            });
        }
        Ok(Self {
            config: manifest.config,
            views: manifest.views,
            frames,
            maps,
        })
    }
}

fn read_array<T: ndarray_npy::ReadableElement>(path: &PathBuf, dim: (usize, usize)) -> Result<Array2<T>> {
    if !path.exists() {
        return Err(Error::format(path, "missing file"));
    }
    let a: Array2<T> = read_npy(path).map_err(|e| Error::format(path, e.to_string()))?;
    if a.dim() != dim {
        return Err(Error::format(path, format!("expected {}x{} array, found {:?}", dim.0, dim.1, a.dim())));
    }
    Ok(a)
}

/// Pixels where the summed vessel optical depth over a view exceeds
/// `threshold` at any phase.
pub fn vessel_union_mask(depths: &[Array2<f64>], threshold: f64) -> Array2<bool> {
    let mut out = Array2::from_elem(depths[0].dim(), false);
    for d in depths {
        Zip::from(&mut out).and(d).for_each(|o, &x| *o |= x > threshold);
    }
    out
}
