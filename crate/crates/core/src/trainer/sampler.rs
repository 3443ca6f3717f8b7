use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::dataset::AngiogramDataset;
use crate::error::{Error, Result};
use crate::geometry::{generate_ray, Ray};

/// A training pixel drawn for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRay {
    pub view: usize,
    pub u: usize,
    pub v: usize,
    /// Cardiac phase of the frame the pixel was taken from.
    pub phase: usize,
    pub target: f64,
    /// Inside the view's high-variance mask.
    pub vessel_likely: bool,
}

struct ViewPixels {
    view: usize,
    rays: Vec<Ray>,
    /// Flat indices of high-variance pixels and their map weights.
    masked: Vec<usize>,
    masked_dist: Option<WeightedIndex<f64>>,
}

/// Draws training pixels from a fixed set of views. Rays through every
/// pixel are computed once up front.
pub struct PixelSampler {
    views: Vec<ViewPixels>,
    width: usize,
    height: usize,
    phases: usize,
}

impl PixelSampler {
    pub fn new(dataset: &AngiogramDataset, view_ids: &[usize]) -> Result<Self> {
        if view_ids.is_empty() {
            return Err(Error::Argument("no training views".into()));
        }
        let (width, height) = dataset.detector_size();
        let mut views = Vec::with_capacity(view_ids.len());
        for &view in view_ids {
            let pose = &dataset
                .views
                .get(view)
                .ok_or_else(|| Error::Argument(format!("no view {view} in dataset")))?
                .pose;
            let mut rays = Vec::with_capacity(width * height);
            for v in 0..height {
                for u in 0..width {
                    rays.push(generate_ray(pose, u, v)?);
                }
            }
            let map = &dataset.maps[view];
            let masked: Vec<usize> = map
                .high_variance_mask
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(|(k, _)| k)
                .collect();
            let weights = map.weights.as_slice().expect("standard layout");
            let masked_dist = WeightedIndex::new(masked.iter().map(|k| weights[*k])).ok();
            views.push(ViewPixels {
                view,
                rays,
                masked,
                masked_dist,
            });
        }
        Ok(Self {
            views,
            width,
            height,
            phases: dataset.phases(),
        })
    }

    pub fn ray(&self, slot: usize, u: usize, v: usize) -> &Ray {
        &self.views[slot].rays[v * self.width + u]
    }

    fn slot_of(&self, view: usize) -> usize {
        self.views.iter().position(|p| p.view == view).expect("sampled view")
    }

    /// Ray for a drawn pixel.
    pub fn ray_for(&self, r: &BatchRay) -> &Ray {
        self.ray(self.slot_of(r.view), r.u, r.v)
    }

    /// `floor(fraction * batch_rays)` pixels from the high-variance masks,
    /// weighted by the maps, then uniform pixels for the rest. Views and
    /// phases are drawn uniformly in both cases.
    pub fn sample_batch(
        &self,
        dataset: &AngiogramDataset,
        batch_rays: usize,
        weighted_fraction: f64,
        rng: &mut impl Rng,
    ) -> Vec<BatchRay> {
        let weighted = (weighted_fraction * batch_rays as f64).floor() as usize;
        let pixels = self.width * self.height;
        let mut out = Vec::with_capacity(batch_rays);
        for k in 0..batch_rays {
            let slot = rng.gen_range(0..self.views.len());
            let phase = rng.gen_range(1..=self.phases);
            let vp = &self.views[slot];
            let flat = match (&vp.masked_dist, k < weighted) {
                (Some(dist), true) => vp.masked[dist.sample(rng)],
                _ => rng.gen_range(0..pixels),
            };
            let (u, v) = (flat % self.width, flat / self.width);
            let map = &dataset.maps[vp.view];
            out.push(BatchRay {
                view: vp.view,
                u,
                v,
                phase,
                target: dataset.frame(vp.view, phase).image[[v, u]],
                vessel_likely: map.high_variance_mask[[v, u]],
            });
        }
        out
    }
}
