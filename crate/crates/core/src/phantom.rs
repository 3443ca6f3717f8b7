//! Procedural 4D ground truth: a coronary-like vessel tree that moves with the
//! cardiac phase, laid over a static background of analytic shapes, plus a
//! loader for external 4D voxel volumes.
//!
//! Cardiac phases are 1-based (`1..=T`) and wrap modulo `T`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Ray;

/// An attenuation field over space and cardiac phase, in inverse scene units.
pub trait DensityField: Sync {
    fn density(&self, x: &Vector3<f64>, phase: usize) -> f64;

    /// Densities at `ray.at(t)` for each `t`. Implementations may override
    /// this to cull geometry that cannot touch the ray.
    fn densities_along(&self, ray: &Ray, ts: &[f64], phase: usize, out: &mut [f64]) {
        for (o, &t) in out.iter_mut().zip(ts) {
            *o = self.density(&ray.at(t), phase);
        }
    }
}

/// A field that is zero everywhere.
pub struct EmptyField;

impl DensityField for EmptyField {
    fn density(&self, _x: &Vector3<f64>, _phase: usize) -> f64 {
        0.0
    }
}

/// Maps any positive phase index onto `1..=period`.
pub fn wrap_phase(phase: usize, period: usize) -> usize {
    debug_assert!(period > 0);
    (phase + period - 1) % period + 1
}

// ---------------------------------------------------------------------------
// Analytic primitives

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
    },
    /// Circular cylinder around `axis` through `center`. Without
    /// `half_length` it is infinite.
    Cylinder {
        center: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        #[serde(default)]
        half_length: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub name: String,
    #[serde(flatten)]
    pub shape: Shape,
    /// Attenuation inside the shape.
    pub attenuation: f64,
    /// Relative semi-axis oscillation over the cardiac cycle. Only honoured
    /// by the phantom when heart motion is switched on.
    #[serde(default)]
    pub pulsates: bool,
}

impl Primitive {
    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        self.contains_scaled(x, 1.0)
    }

    fn contains_scaled(&self, x: &Vector3<f64>, scale: f64) -> bool {
        match &self.shape {
            Shape::Sphere { center, radius } => {
                (x - Vector3::from(*center)).norm_squared() <= (radius * scale).powi(2)
            }
            Shape::Ellipsoid { center, semi_axes } => {
                let d = x - Vector3::from(*center);
                (0..3)
                    .map(|k| (d[k] / (semi_axes[k] * scale)).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Cylinder {
                center,
                axis,
                radius,
                half_length,
            } => {
                let a = Vector3::from(*axis).normalize();
                let d = x - Vector3::from(*center);
                let along = d.dot(&a);
                if let Some(h) = half_length {
                    if along.abs() > h * scale {
                        return false;
                    }
                }
                (d - a * along).norm_squared() <= (radius * scale).powi(2)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.attenuation >= 0.0
            && self.attenuation.is_finite()
            && match &self.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Ellipsoid { semi_axes, .. } => semi_axes.iter().all(|s| *s > 0.0),
                Shape::Cylinder {
                    axis,
                    radius,
                    half_length,
                    ..
                } => {
                    *radius > 0.0
                        && Vector3::from(*axis).norm() > 0.0
                        && half_length.is_none_or(|h| h > 0.0)
                }
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid primitive '{}'", self.name)))
        }
    }
}

/// Optical depth of `primitive` along the clipped ray, in closed form.
/// Supports spheres and infinite cylinders.
pub fn analytic_line_integral(ray: &Ray, primitive: &Primitive) -> Result<f64> {
    let o = ray.origin;
    let d = ray.direction;
    // Entry/exit parameters of the full line, then clipped to the ray span.
    let span = match &primitive.shape {
        Shape::Sphere { center, radius } => {
            let oc = o - Vector3::from(*center);
            let b = oc.dot(&d);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            (disc > 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
        }
        Shape::Cylinder {
            center,
            axis,
            radius,
            half_length: None,
        } => {
            let a = Vector3::from(*axis).normalize();
            let oc = o - Vector3::from(*center);
            let dp = d - a * d.dot(&a);
            let op = oc - a * oc.dot(&a);
            let qa = dp.norm_squared();
            if qa < 1e-300 {
                // Parallel to the axis: inside for the whole span or never.
                return Ok(if op.norm() < *radius {
                    primitive.attenuation * ray.length()
                } else {
                    0.0
                });
            }
            let qb = op.dot(&dp);
            let disc = qb * qb - qa * (op.norm_squared() - radius * radius);
            (disc > 0.0).then(|| ((-qb - disc.sqrt()) / qa, (-qb + disc.sqrt()) / qa))
        }
        other => {
            return Err(Error::Capability(format!(
                "no closed-form line integral for {other:?}"
            )))
        }
    };
    Ok(match span {
        Some((a, b)) => {
            let chord = (b.min(ray.t_far) - a.max(ray.t_near)).max(0.0);
            primitive.attenuation * chord
        }
        None => 0.0,
    })
}

// ---------------------------------------------------------------------------
// Background

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub primitives: Vec<Primitive>,
}

impl BackgroundModel {
    /// Torso, heart and spine.
    pub fn default_chest() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    name: "torso".into(),
                    shape: Shape::Ellipsoid {
                        center: [0.0, 0.0, 0.0],
                        semi_axes: [0.95, 1.2, 0.75],
                    },
                    attenuation: 0.3,
                    pulsates: false,
                },
                Primitive {
                    name: "heart".into(),
                    shape: Shape::Ellipsoid {
                        center: [0.08, 0.05, -0.05],
                        semi_axes: [0.42, 0.38, 0.36],
                    },
                    attenuation: 0.5,
                    pulsates: true,
                },
                Primitive {
                    name: "spine".into(),
                    shape: Shape::Cylinder {
                        center: [0.0, 0.0, 0.55],
                        axis: [0.0, 1.0, 0.0],
                        radius: 0.13,
                        half_length: None,
                    },
                    attenuation: 0.8,
                    pulsates: false,
                },
            ],
        }
    }

    /// Sum of the attenuations of every primitive containing `x`.
    pub fn background_density(&self, x: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .filter(|p| p.contains(x))
            .map(|p| p.attenuation)
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Vessel tree

/// One vessel: a Catmull-Rom centerline through `control_points` with a
/// radius tapering linearly from `radius_start` to `radius_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub control_points: Vec<[f64; 3]>,
    pub radius_start: f64,
    pub radius_end: f64,
}

/// Smooth periodic displacement field. A rest position `p` at phase `i`
/// moves by
/// `A * (sin(2*pi*(i-1)/T + k*|p - root|) - sin(k*|p - root|)) / 2`
/// along the unit vector from `p` toward `center`. It vanishes at phase 1,
/// is periodic in `T`, and never exceeds `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub amplitude: f64,
    pub center: [f64; 3],
    pub root: [f64; 3],
    /// Phase lag per unit distance from the root (radians per scene unit).
    pub wave_number: f64,
}

impl Deformation {
    pub fn displacement(&self, p: &Vector3<f64>, phase: usize, period: usize) -> Vector3<f64> {
        let toward = Vector3::from(self.center) - p;
        let n = toward.norm();
        if n < 1e-12 || self.amplitude == 0.0 {
            return Vector3::zeros();
        }
        let lag = self.wave_number * (p - Vector3::from(self.root)).norm();
        let angle = 2.0 * std::f64::consts::PI * (wrap_phase(phase, period) - 1) as f64 / period as f64;
        let s = 0.5 * ((angle + lag).sin() - lag.sin());
        toward / n * (self.amplitude * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius_a: f64,
    pub radius_b: f64,
}

impl Segment {
    /// Distance from `x` to the segment and the tube radius at the closest point.
    pub fn distance_and_radius(&self, x: &Vector3<f64>) -> (f64, f64) {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let s = if len2 > 0.0 {
            ((x - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let closest = self.a + ab * s;
        (
            (x - closest).norm(),
            self.radius_a + s * (self.radius_b - self.radius_a),
        )
    }

    fn contains(&self, x: &Vector3<f64>) -> bool {
        let (d, r) = self.distance_and_radius(x);
        d <= r
    }

    fn bounding_sphere(&self) -> (Vector3<f64>, f64) {
        let c = (self.a + self.b) * 0.5;
        (c, (self.b - self.a).norm() * 0.5 + self.radius_a.max(self.radius_b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselTreeConfig {
    pub branches: Vec<Branch>,
    /// Contrast-filled vessel attenuation (mu_v).
    pub attenuation: f64,
    pub deformation: Deformation,
    /// Polyline segments per Catmull-Rom span.
    pub segments_per_span: usize,
}

/// The vessel tree with its centerline pre-tessellated for every phase.
#[derive(Clone, Debug)]
pub struct VesselTree {
    pub config: VesselTreeConfig,
    pub period: usize,
    /// `segments[i - 1]` holds the deformed tube at phase `i`.
    segments: Vec<Vec<Segment>>,
}

fn catmull_rom(p0: &Vector3<f64>, p1: &Vector3<f64>, p2: &Vector3<f64>, p3: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let t2 = t * t;
    let t3 = t2 * t;
    (p1 * 2.0 + (p2 - p0) * t + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2 + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3)
        * 0.5
}

fn tessellate(points: &[Vector3<f64>], r0: f64, r1: f64, per_span: usize) -> Vec<Segment> {
    let n = points.len();
    let get = |k: isize| -> Vector3<f64> {
        if k < 0 {
            points[0] * 2.0 - points[1]
        } else if k as usize >= n {
            points[n - 1] * 2.0 - points[n - 2]
        } else {
            points[k as usize]
        }
    };
    let mut poly = Vec::with_capacity((n - 1) * per_span + 1);
    for span in 0..n - 1 {
        let k = span as isize;
        let (p0, p1, p2, p3) = (get(k - 1), get(k), get(k + 1), get(k + 2));
        for j in 0..per_span {
            poly.push(catmull_rom(&p0, &p1, &p2, &p3, j as f64 / per_span as f64));
        }
    }
    poly.push(points[n - 1]);
    let total = (poly.len() - 1) as f64;
    poly.windows(2)
        .enumerate()
        .map(|(j, w)| Segment {
            a: w[0],
            b: w[1],
            radius_a: r0 + (r1 - r0) * j as f64 / total,
            radius_b: r0 + (r1 - r0) * (j + 1) as f64 / total,
        })
        .collect()
}

impl VesselTree {
    pub fn new(config: VesselTreeConfig, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("cardiac period must be at least 1".into()));
        }
        if !(config.attenuation > 0.0 && config.attenuation.is_finite()) {
            return Err(Error::Config("vessel attenuation must be positive".into()));
        }
        if config.segments_per_span == 0 {
            return Err(Error::Config("segments_per_span must be positive".into()));
        }
        if !(config.deformation.amplitude >= 0.0) {
            return Err(Error::Config("deformation amplitude must be non-negative".into()));
        }
        for (k, b) in config.branches.iter().enumerate() {
            if b.control_points.len() < 2 {
                return Err(Error::Config(format!("branch {k} needs at least two control points")));
            }
            if !(b.radius_start > 0.0 && b.radius_end > 0.0) {
                return Err(Error::Config(format!("branch {k} has a non-positive radius")));
            }
        }
        let segments = (1..=period)
            .map(|phase| {
                config
                    .branches
                    .iter()
                    .flat_map(|b| {
                        let pts: Vec<Vector3<f64>> = b
                            .control_points
                            .iter()
                            .map(|p| {
                                let p = Vector3::from(*p);
                                p + config.deformation.displacement(&p, phase, period)
                            })
                            .collect();
                        tessellate(&pts, b.radius_start, b.radius_end, config.segments_per_span)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            period,
            segments,
        })
    }

    pub fn segments(&self, phase: usize) -> &[Segment] {
        &self.segments[wrap_phase(phase, self.period) - 1]
    }

    /// `mu_v` inside any deformed tube at `phase`, else 0.
    pub fn vessel_density(&self, x: &Vector3<f64>, phase: usize) -> f64 {
        if self.segments(phase).iter().any(|s| s.contains(x)) {
            self.config.attenuation
        } else {
            0.0
        }
    }

    /// Segments whose bounding sphere the ray line passes through.
    pub fn segments_near(&self, ray: &Ray, phase: usize) -> Vec<Segment> {
        self.segments(phase)
            .iter()
            .filter(|s| {
                let (c, r) = s.bounding_sphere();
                let oc = c - ray.origin;
                let along = oc.dot(&ray.direction);
                (oc - ray.direction * along).norm_squared() <= r * r
            })
            .copied()
            .collect()
    }

    /// Largest displacement of any tessellation vertex between consecutive phases.
    pub fn max_phase_step(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 1..=self.period {
            let a = self.segments(i);
            let b = self.segments(i + 1);
            for (sa, sb) in a.iter().zip(b) {
                worst = worst.max((sa.a - sb.a).norm()).max((sa.b - sb.b).norm());
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// Full phantom

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Number of cardiac phases per heartbeat (T).
    pub cardiac_phases: usize,
    pub background: BackgroundModel,
    pub vessels: VesselTreeConfig,
    /// Relative size oscillation of pulsating background shapes; 0 keeps the
    /// background static.
    pub heart_motion: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            cardiac_phases: 10,
            background: BackgroundModel::default_chest(),
            vessels: default_vessel_tree(7),
            heart_motion: 0.0,
        }
    }
}

/// A three-generation bifurcating tree (1 + 2 + 4 branches) draped over the
/// anterior heart surface. `seed` only perturbs control points slightly.
pub fn default_vessel_tree(seed: u64) -> VesselTreeConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = Vector3::new(0.0, -0.42, -0.32);
    let heart = Vector3::new(0.08, 0.05, -0.05);
    let radii = [(0.030, 0.024), (0.022, 0.016), (0.015, 0.010)];
    let lengths = [0.28, 0.42, 0.34];
    let mut branches = Vec::new();

    // (start, direction, generation)
    let mut stack = vec![(root, Vector3::new(0.25, 1.0, 0.1).normalize(), 0usize)];
    while let Some((start, dir, gen)) = stack.pop() {
        let len = lengths[gen];
        let mut pts = vec![start];
        let mut p = start;
        let mut d = dir;
        for _ in 0..3 {
            let wobble = Vector3::new(
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
                rng.gen_range(-0.15..0.15),
            );
            d = (d + wobble).normalize();
            p += d * (len / 3.0);
            // Keep the centerline near the heart surface.
            let r: Vector3<f64> = p - heart;
            let target = 0.40 + 0.02 * gen as f64;
            p = heart + r * (0.5 + 0.5 * target / r.norm().max(1e-9));
            pts.push(p);
        }
        branches.push(Branch {
            control_points: pts.iter().map(|v| [v.x, v.y, v.z]).collect(),
            radius_start: radii[gen].0,
            radius_end: radii[gen].1,
        });
        if gen + 1 < radii.len() {
            let end = *pts.last().unwrap();
            let tangent = (pts[3] - pts[2]).normalize();
            let side = tangent.cross(&(end - heart)).normalize();
            let spread = 0.55 - 0.1 * gen as f64;
            for sign in [-1.0, 1.0] {
                let child = (tangent * spread.cos() + side * (sign * spread.sin())).normalize();
                stack.push((end, child, gen + 1));
            }
        }
    }
    VesselTreeConfig {
        branches,
        attenuation: 3.0,
        deformation: Deformation {
            amplitude: 0.04,
            center: [heart.x, heart.y, heart.z],
            root: [root.x, root.y, root.z],
            wave_number: 1.5,
        },
        segments_per_span: 6,
    }
}

impl PhantomConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Background plus vessels, queryable per channel.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub background: BackgroundModel,
    pub vessels: VesselTree,
    heart_motion: f64,
}

impl Phantom {
    pub fn new(config: &PhantomConfig) -> Result<Self> {
        for p in &config.background.primitives {
            p.validate()?;
        }
        if !(config.heart_motion.abs() < 0.5) {
            return Err(Error::Config("heart_motion must lie in (-0.5, 0.5)".into()));
        }
        Ok(Self {
            background: config.background.clone(),
            vessels: VesselTree::new(config.vessels.clone(), config.cardiac_phases)?,
            heart_motion: config.heart_motion,
        })
    }

    pub fn period(&self) -> usize {
        self.vessels.period
    }

    pub fn vessel_density(&self, x: &Vector3<f64>, phase: usize) -> f64 {
        self.vessels.vessel_density(x, phase)
    }

    pub fn background_density(&self, x: &Vector3<f64>) -> f64 {
        self.background.background_density(x)
    }

    fn background_at(&self, x: &Vector3<f64>, phase: usize) -> f64 {
        if self.heart_motion == 0.0 {
            return self.background_density(x);
        }
        let angle = 2.0 * std::f64::consts::PI * (wrap_phase(phase, self.period()) - 1) as f64
            / self.period() as f64;
        let scale = 1.0 + self.heart_motion * angle.sin();
        self.background
            .primitives
            .iter()
            .filter(|p| p.contains_scaled(x, if p.pulsates { scale } else { 1.0 }))
            .map(|p| p.attenuation)
            .sum()
    }

    pub fn vessel_field(&self) -> ChannelView<'_> {
        ChannelView {
            phantom: self,
            channel: Channel::Vessel,
        }
    }

    pub fn background_field(&self) -> ChannelView<'_> {
        ChannelView {
            phantom: self,
            channel: Channel::Background,
        }
    }

    pub fn composite_field(&self) -> ChannelView<'_> {
        ChannelView {
            phantom: self,
            channel: Channel::Composite,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    Vessel,
    Background,
    Composite,
}

/// One channel of a [`Phantom`] exposed as a [`DensityField`].
pub struct ChannelView<'a> {
    phantom: &'a Phantom,
    channel: Channel,
}

impl DensityField for ChannelView<'_> {
    fn density(&self, x: &Vector3<f64>, phase: usize) -> f64 {
        match self.channel {
            Channel::Vessel => self.phantom.vessel_density(x, phase),
            Channel::Background => self.phantom.background_at(x, phase),
            Channel::Composite => self.phantom.background_at(x, phase) + self.phantom.vessel_density(x, phase),
        }
    }

    fn densities_along(&self, ray: &Ray, ts: &[f64], phase: usize, out: &mut [f64]) {
        let near = if self.channel == Channel::Background {
            Vec::new()
        } else {
            self.phantom.vessels.segments_near(ray, phase)
        };
        let mu_v = self.phantom.vessels.config.attenuation;
        for (o, &t) in out.iter_mut().zip(ts) {
            let x = ray.at(t);
            let vessel = if near.iter().any(|s| s.contains(&x)) { mu_v } else { 0.0 };
            *o = match self.channel {
                Channel::Vessel => vessel,
                Channel::Background => self.phantom.background_at(&x, phase),
                Channel::Composite => self.phantom.background_at(&x, phase) + vessel,
            };
        }
    }
}

// ---------------------------------------------------------------------------
// Voxel volumes

const VOXEL_MAGIC: &[u8; 8] = b"NCAVOX01";

/// Phase-major stack of attenuation volumes centred on the isocenter.
/// Voxel `(x, y, z)` of phase `i` is stored at
/// `((i - 1) * nz + z) * ny * nx + y * nx + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid4D {
    pub dims: [usize; 3],
    pub phases: usize,
    /// Edge length of one voxel in scene units.
    pub spacing: f64,
    pub values: Vec<f32>,
}

impl VoxelGrid4D {
    pub fn new(dims: [usize; 3], phases: usize, spacing: f64, values: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) || phases == 0 {
            return Err(Error::Argument("voxel grid dimensions must be positive".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Argument("voxel spacing must be positive".into()));
        }
        if values.len() != dims.iter().product::<usize>() * phases {
            return Err(Error::Argument("voxel value count does not match dimensions".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Argument("voxel values must be finite and non-negative".into()));
        }
        Ok(Self {
            dims,
            phases,
            spacing,
            values,
        })
    }

    /// Samples `field` at every voxel center.
    pub fn rasterize(field: &dyn DensityField, dims: [usize; 3], phases: usize, spacing: f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims.iter().product::<usize>() * phases);
        let mut grid = Self {
            dims,
            phases,
            spacing,
            values: Vec::new(),
        };
        for phase in 1..=phases {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let p = grid.voxel_center([x, y, z]);
                        values.push(field.density(&p, phase) as f32);
                    }
                }
            }
        }
        grid.values = values;
        Self::new(grid.dims, grid.phases, grid.spacing, grid.values)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        Vector3::from_fn(|k, _| (idx[k] as f64 + 0.5 - self.dims[k] as f64 / 2.0) * self.spacing)
    }

    fn at(&self, phase: usize, x: usize, y: usize, z: usize) -> f64 {
        let [nx, ny, nz] = self.dims;
        self.values[((phase - 1) * nz + z) * ny * nx + y * nx + x] as f64
    }

    /// Trilinear interpolation in the phase volume. Points outside the grid
    /// extent read as 0; within half a voxel of the border the nearest
    /// interior sample is extended.
    pub fn sample(&self, x: &Vector3<f64>, phase: usize) -> f64 {
        let phase = wrap_phase(phase, self.phases);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let n = self.dims[k];
            let half = n as f64 * self.spacing / 2.0;
            if x[k].abs() > half {
                return 0.0;
            }
            let g = (x[k] + half) / self.spacing - 0.5;
            let g = g.clamp(0.0, (n - 1) as f64);
            let i0 = (g.floor() as usize).min(n.saturating_sub(2));
            base[k] = i0;
            frac[k] = if n == 1 { 0.0 } else { g - i0 as f64 };
        }
        let mut acc = 0.0;
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for k in 0..3 {
                let bit = (corner >> k) & 1;
                if self.dims[k] == 1 && bit == 1 {
                    w = 0.0;
                    break;
                }
                idx[k] = base[k] + bit;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                acc += w * self.at(phase, idx[0], idx[1], idx[2]);
            }
        }
        acc
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut bytes = Vec::with_capacity(40 + self.values.len() * 4);
        bytes.extend_from_slice(VOXEL_MAGIC);
        for d in self.dims {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&(self.phases as u32).to_le_bytes());
        bytes.extend_from_slice(&self.spacing.to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a voxel file written by [`VoxelGrid4D::save`].
pub fn load_voxel_grid(path: &Path) -> Result<VoxelGrid4D> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 || &bytes[..8] != VOXEL_MAGIC {
        return Err(Error::format(path, "missing voxel grid header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = [u32_at(8), u32_at(12), u32_at(16)];
    let phases = u32_at(20);
    let spacing = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let count = dims
        .iter()
        .try_fold(phases, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    if bytes.len() != 32 + count * 4 {
        return Err(Error::format(
            path,
            format!("expected {} voxel values, found {} bytes of payload", count, bytes.len() - 32),
        ));
    }
    let values = bytes[32..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VoxelGrid4D::new(dims, phases, spacing, values).map_err(|e| Error::format(path, e.to_string()))
}

/// Convenience wrapper matching [`VoxelGrid4D::sample`].
pub fn sample_voxel_grid(grid: &VoxelGrid4D, x: &Vector3<f64>, phase: usize) -> f64 {
    grid.sample(x, phase)
}

impl DensityField for VoxelGrid4D {
    fn density(&self, x: &Vector3<f64>, phase: usize) -> f64 {
        self.sample(x, phase)
    }
}
