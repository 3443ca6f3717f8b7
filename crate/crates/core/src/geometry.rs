//! C-arm cone-beam geometry: poses from Euler angles, per-pixel rays clipped
//! to the scene box, and selection of training/validation view sets.
//!
//! Conventions. The scene lives in the cube `[-1, 1]^3` centred on the
//! isocenter. `x` is the patient's lateral axis, `y` the head-foot axis and
//! `z` the anterior-posterior axis. At `theta = phi = 0` the source sits on
//! the negative `z` axis and looks along `+z`. The rotation applies `theta`
//! about `y` first, then `phi` about `x`: `R = R_x(phi) * R_y(theta)`.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half side length of the axis-aligned scene cube.
pub const SCENE_HALF_EXTENT: f64 = 1.0;

/// A `(theta, phi)` pair in degrees.
pub type Angles = [f64; 2];

/// Rectangular window of C-arm angles used when more than the configured
/// number of training views is requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleWindow {
    /// Window center `(theta, phi)` in degrees.
    pub center: Angles,
    /// Full width of the window along each angle, degrees.
    pub extent: f64,
}

/// Scanner description. Distances are in scene units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerConfig {
    pub source_to_isocenter: f64,
    pub source_to_detector: f64,
    pub detector_width: usize,
    pub detector_height: usize,
    /// Detector pixel size in scene units.
    pub pixel_pitch: f64,
    /// Optimal training views (four in the standard protocol).
    pub training_views: Vec<Angles>,
    /// Held-out validation views.
    pub validation_views: Vec<Angles>,
    pub angle_window: AngleWindow,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        // Views follow common left-coronary projections: RAO caudal, LAO
        // caudal ("spider"), AP cranial and LAO cranial for training;
        // RAO cranial, AP caudal, steep LAO cranial and shallow RAO for
        // validation.
        Self {
            source_to_isocenter: 4.0,
            source_to_detector: 6.0,
            detector_width: 64,
            detector_height: 64,
            pixel_pitch: 0.033,
            training_views: vec![[-30.0, -25.0], [45.0, -25.0], [0.0, 40.0], [40.0, 25.0]],
            validation_views: vec![[-30.0, 30.0], [0.0, -30.0], [60.0, 20.0], [-15.0, 5.0]],
            angle_window: AngleWindow {
                center: [0.0, 0.0],
                extent: 60.0,
            },
        }
    }
}

impl ScannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.source_to_isocenter > 0.0 && self.source_to_isocenter.is_finite()) {
            return Err(Error::Config("source_to_isocenter must be positive".into()));
        }
        if !(self.source_to_detector > self.source_to_isocenter && self.source_to_detector.is_finite()) {
            return Err(Error::Config(
                "source_to_detector must exceed source_to_isocenter".into(),
            ));
        }
        if self.source_to_isocenter <= SCENE_HALF_EXTENT * 3f64.sqrt() {
            return Err(Error::Config("source must lie outside the scene cube".into()));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(Error::Config("pixel_pitch must be positive".into()));
        }
        if self.detector_width == 0 || self.detector_height == 0 {
            return Err(Error::Config("detector must have at least one pixel".into()));
        }
        if !(self.angle_window.extent > 0.0 && self.angle_window.extent <= 180.0) {
            return Err(Error::Config("angle_window.extent must lie in (0, 180]".into()));
        }
        for a in self.training_views.iter().chain(&self.validation_views) {
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("non-finite view angle {a:?}")));
            }
        }
        for t in &self.training_views {
            if self.validation_views.iter().any(|v| same_angles(*t, *v)) {
                return Err(Error::Config(format!(
                    "view {t:?} is listed as both training and validation"
                )));
            }
        }
        Ok(())
    }
}

fn same_angles(a: Angles, b: Angles) -> bool {
    (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9
}

/// Rotation for C-arm angles given in degrees.
pub fn rotation(theta_deg: f64, phi_deg: f64) -> Matrix3<f64> {
    let (st, ct) = theta_deg.to_radians().sin_cos();
    let (sp, cp) = phi_deg.to_radians().sin_cos();
    let r_theta = Matrix3::new(ct, 0.0, st, 0.0, 1.0, 0.0, -st, 0.0, ct);
    let r_phi = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    r_phi * r_theta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Primary angle (LAO/RAO), degrees.
    pub theta: f64,
    /// Secondary angle (cranial/caudal), degrees.
    pub phi: f64,
    pub source_to_isocenter: f64,
    pub source_to_detector: f64,
    pub detector_width: usize,
    pub detector_height: usize,
    pub pixel_pitch: f64,
}

impl CameraPose {
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation(self.theta, self.phi)
    }

    pub fn source_position(&self) -> Vector3<f64> {
        self.rotation() * Vector3::new(0.0, 0.0, -self.source_to_isocenter)
    }

    /// World position of the center of detector pixel `(u, v)`; `u` indexes
    /// columns and `v` rows. Fractional indices address sub-pixel points.
    pub fn detector_point(&self, u: f64, v: f64) -> Vector3<f64> {
        let du = (u + 0.5 - self.detector_width as f64 / 2.0) * self.pixel_pitch;
        let dv = (v + 0.5 - self.detector_height as f64 / 2.0) * self.pixel_pitch;
        let local = Vector3::new(du, dv, self.source_to_detector - self.source_to_isocenter);
        self.rotation() * local
    }

    pub fn pixel_count(&self) -> usize {
        self.detector_width * self.detector_height
    }
}

/// Builds a pose and checks that every detector pixel sees the scene cube.
pub fn pose_from_euler(theta: f64, phi: f64, system: &ScannerConfig) -> Result<CameraPose> {
    if !(theta.is_finite() && phi.is_finite()) {
        return Err(Error::Argument(format!("non-finite angles ({theta}, {phi})")));
    }
    system.validate()?;
    let pose = CameraPose {
        theta,
        phi,
        source_to_isocenter: system.source_to_isocenter,
        source_to_detector: system.source_to_detector,
        detector_width: system.detector_width,
        detector_height: system.detector_height,
        pixel_pitch: system.pixel_pitch,
    };
    // The pixel rays that hit a convex box form a convex set on the detector
    // plane, so checking the corners covers every pixel.
    let (w, h) = (pose.detector_width - 1, pose.detector_height - 1);
    for (u, v) in [(0, 0), (w, 0), (0, h), (w, h)] {
        let d = (pose.detector_point(u as f64, v as f64) - pose.source_position()).normalize();
        if clip_to_scene(&pose.source_position(), &d).is_none() {
            return Err(Error::Config(format!(
                "detector pixel ({u}, {v}) misses the scene cube at ({theta}, {phi}); reduce pixel_pitch"
            )));
        }
    }
    Ok(pose)
}

/// A ray `r(t) = origin + t * direction` restricted to `[t_near, t_far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }
}

/// Slab intersection of a ray with the scene cube. Returns `(t_near, t_far)`
/// with `t_far > t_near >= 0`, or `None` on a miss.
pub fn clip_to_scene(origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let o = origin[axis];
        let d = direction[axis];
        if d.abs() < 1e-300 {
            if o.abs() > SCENE_HALF_EXTENT {
                return None;
            }
            continue;
        }
        let a = (-SCENE_HALF_EXTENT - o) / d;
        let b = (SCENE_HALF_EXTENT - o) / d;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Ray from the source through the center of pixel `(u, v)`.
pub fn generate_ray(pose: &CameraPose, u: usize, v: usize) -> Result<Ray> {
    if u >= pose.detector_width || v >= pose.detector_height {
        return Err(Error::Argument(format!(
            "pixel ({u}, {v}) outside {}x{} detector",
            pose.detector_width, pose.detector_height
        )));
    }
    ray_through(pose, u as f64, v as f64)
}

/// Ray through a fractional detector position.
pub fn ray_through(pose: &CameraPose, u: f64, v: f64) -> Result<Ray> {
    let origin = pose.source_position();
    let direction = (pose.detector_point(u, v) - origin).normalize();
    let (t_near, t_far) = clip_to_scene(&origin, &direction)
        .ok_or_else(|| Error::Argument(format!("ray through ({u}, {v}) misses the scene")))?;
    Ok(Ray {
        origin,
        direction,
        t_near,
        t_far,
    })
}

/// Training and validation poses for one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub training_poses: Vec<CameraPose>,
    pub validation_poses: Vec<CameraPose>,
    /// Full width of the sampling window in degrees.
    pub angle_range: f64,
}

/// Chooses `k` training views. Up to the number of configured optimal views
/// those are used in order; beyond that, `k` views are drawn uniformly from
/// the angle window with a seeded generator. The validation set is always the
/// configured one.
pub fn make_view_plan(k: usize, config: &ScannerConfig, seed: u64) -> Result<ViewPlan> {
    if k < 1 {
        return Err(Error::Argument("at least one training view is required".into()));
    }
    config.validate()?;
    let validation_poses = config
        .validation_views
        .iter()
        .map(|a| pose_from_euler(a[0], a[1], config))
        .collect::<Result<Vec<_>>>()?;

    let training_angles: Vec<Angles> = if k <= config.training_views.len() {
        config.training_views[..k].to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = config.angle_window.extent / 2.0;
        let [tc, pc] = config.angle_window.center;
        let mut out: Vec<Angles> = Vec::with_capacity(k);
        while out.len() < k {
            let a = [
                tc + rng.gen_range(-half..=half),
                pc + rng.gen_range(-half..=half),
            ];
            let clash = config
                .validation_views
                .iter()
                .chain(out.iter())
                .any(|b| same_angles(a, *b));
            if !clash {
                out.push(a);
            }
        }
        out
    };
    let training_poses = training_angles
        .iter()
        .map(|a| pose_from_euler(a[0], a[1], config))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewPlan {
        training_poses,
        validation_poses,
        angle_range: config.angle_window.extent,
    })
}
