//! Parametric scenes, ray-cast ground truth and the forward sensor model.
//!
//! The camera is a pinhole looking down +Z with +X to the right and +Y down
//! the image. Depth is the radial distance along each pixel ray, which is what
//! an AMCW sensor measures.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::classic::{reconstruct, DepthMap, MaskConfig};
use crate::dataset::{DatasetSample, SampleMeta};
use crate::signal::{
    phase_from_depth, sample_correlation, unambiguous_range, ModulationConfig, PixelTruth,
};

/// Ambient offset per (irradiance unit × µs).
pub const K_AMBIENT: f64 = 1.0;
/// Ray misses are filled with this fraction of the unambiguous range.
pub const FAR_PLANE_FRACTION: f64 = 0.95;
const HIT_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("invalid sensor configuration: {0}")]
    InvalidSensor(String),
    #[error("invalid exposure pair: short {short} µs must be below long {long} µs")]
    ExposureOrder { short: f64, long: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn length(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.length())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Infinite plane through `point` with the given normal.
    Plane { point: Vec3, normal: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box.
    Box { min: Vec3, max: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Fraction of incident modulated light returned, in `(0, 1]`.
    pub reflectivity: f64,
}

impl Primitive {
    pub fn plane(point: Vec3, normal: Vec3, reflectivity: f64) -> Self {
        Self {
            shape: Shape::Plane {
                point,
                normal: normal.normalized(),
            },
            reflectivity,
        }
    }

    pub fn sphere(center: Vec3, radius: f64, reflectivity: f64) -> Self {
        Self {
            shape: Shape::Sphere { center, radius },
            reflectivity,
        }
    }

    pub fn aabb(min: Vec3, max: Vec3, reflectivity: f64) -> Self {
        Self {
            shape: Shape::Box { min, max },
            reflectivity,
        }
    }

    /// Nearest positive ray parameter of an intersection, for a unit `dir`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match self.shape {
            Shape::Plane { point, normal } => {
                let denom = dir.dot(normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - origin).dot(normal) / denom;
                (t > HIT_EPSILON).then_some(t)
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > HIT_EPSILON)
            }
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for (o, d, lo, hi) in [
                    (origin.x, dir.x, min.x, max.x),
                    (origin.y, dir.y, min.y, max.y),
                    (origin.z, dir.z, min.z, max.z),
                ] {
                    if d.abs() < 1e-15 {
                        if o < lo || o > hi {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo - o) / d, (hi - o) / d);
                    t_near = t_near.max(a.min(b));
                    t_far = t_far.min(a.max(b));
                }
                if t_near > t_far {
                    return None;
                }
                [t_near, t_far].into_iter().find(|&t| t > HIT_EPSILON)
            }
        }
    }

    /// Whether `p` lies strictly inside the solid (or on the plane).
    fn contains(&self, p: Vec3) -> bool {
        match self.shape {
            Shape::Plane { point, normal } => (p - point).dot(normal).abs() < 1e-9,
            Shape::Sphere { center, radius } => (p - center).length() < radius,
            Shape::Box { min, max } => {
                p.x > min.x && p.x < max.x && p.y > min.y && p.y < max.y && p.z > min.z && p.z < max.z
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Background infrared irradiance (sensor units per µs of exposure).
    pub ambient_level: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.primitives.is_empty() {
            return Err(SceneError::DegenerateScene("scene has no primitives".into()));
        }
        if let Some(p) = self
            .primitives
            .iter()
            .find(|p| !(p.reflectivity > 0.0 && p.reflectivity <= 1.0))
        {
            return Err(SceneError::DegenerateScene(format!(
                "reflectivity {} outside (0, 1]",
                p.reflectivity
            )));
        }
        if !(self.ambient_level.is_finite() && self.ambient_level >= 0.0) {
            return Err(SceneError::DegenerateScene(format!(
                "ambient level {} must be non-negative",
                self.ambient_level
            )));
        }
        Ok(())
    }

    /// Nearest hit: `(distance, reflectivity)`.
    pub fn cast(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir).map(|t| (t, p.reflectivity)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Camera position; the optical axis is always +Z.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CameraPose {
    pub origin: Vec3,
}

impl CameraPose {
    pub fn at(origin: Vec3) -> Self {
        Self { origin }
    }
}

/// Sensor, illumination and noise parameters of one capture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    pub width: usize,
    pub height: usize,
    pub mod_freq_hz: f64,
    pub exposure_us: f64,
    pub adc_full_scale: f64,
    /// Largest demodulated amplitude the sensor can image.
    pub a_max: f64,
    pub read_noise_sigma: f64,
    /// Shot-noise variance per unit of signal.
    pub photon_noise_gain: f64,
    pub source_power: f64,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    /// Round to integers and clamp to `[0, adc_full_scale]`.
    pub quantize: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            mod_freq_hz: 6.0e6,
            exposure_us: 200.0,
            adc_full_scale: 4096.0,
            a_max: 2048.0,
            read_noise_sigma: 3.0,
            photon_noise_gain: 1.0,
            source_power: 16.0,
            fov_deg: 60.0,
            quantize: true,
        }
    }
}

impl SensorConfig {
    pub fn with_exposure(self, exposure_us: f64) -> Self {
        Self { exposure_us, ..self }
    }

    pub fn with_size(self, width: usize, height: usize) -> Self {
        Self { width, height, ..self }
    }

    /// Disables all noise sources and quantization.
    pub fn noiseless(self) -> Self {
        Self {
            read_noise_sigma: 0.0,
            photon_noise_gain: 0.0,
            quantize: false,
            ..self
        }
    }

    pub fn modulation(&self) -> ModulationConfig {
        ModulationConfig {
            mod_freq_hz: self.mod_freq_hz,
            ..ModulationConfig::default()
        }
    }

    pub fn unambiguous_range(&self) -> f64 {
        unambiguous_range(&self.modulation())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |what: &str| Err(SceneError::InvalidSensor(what.to_string()));
        if self.width == 0 || self.height == 0 {
            return fail("resolution must be non-zero");
        }
        if !(self.mod_freq_hz.is_finite() && self.mod_freq_hz > 0.0) {
            return fail("modulation frequency must be positive");
        }
        if !(self.exposure_us.is_finite() && self.exposure_us > 0.0) {
            return fail("exposure must be positive");
        }
        if !(self.adc_full_scale.is_finite() && self.adc_full_scale > 0.0) {
            return fail("ADC full scale must be positive");
        }
        if !(self.a_max > 0.0 && self.a_max <= self.adc_full_scale) {
            return fail("a_max must lie in (0, adc_full_scale]");
        }
        if !(self.read_noise_sigma >= 0.0 && self.photon_noise_gain >= 0.0 && self.source_power >= 0.0) {
            return fail("noise and power parameters must be non-negative");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return fail("field of view must lie in (0°, 180°)");
        }
        Ok(())
    }

    fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Unit ray direction through continuous image coordinates `(u, v)`;
    /// pixel `(col, row)` has its center at `(col + 0.5, row + 0.5)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let f = self.focal_px();
        Vec3::new(
            (u - self.width as f64 / 2.0) / f,
            (v - self.height as f64 / 2.0) / f,
            1.0,
        )
        .normalized()
    }

    pub fn pixel_ray(&self, row: usize, col: usize) -> Vec3 {
        self.ray_direction(col as f64 + 0.5, row as f64 + 0.5)
    }
}

/// Per-pixel geometry of a rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    /// Zero where the ray missed every primitive.
    pub reflectivity: Vec<f64>,
    pub hit: Vec<bool>,
}

fn check_camera(scene: &Scene, pose: &CameraPose) -> Result<(), SceneError> {
    scene.validate()?;
    if let Some(p) = scene.primitives.iter().find(|p| p.contains(pose.origin)) {
        return Err(SceneError::DegenerateScene(format!(
            "camera at {:?} is inside {:?}",
            pose.origin, p.shape
        )));
    }
    Ok(())
}

/// Ray-casts depth and reflectivity for every pixel.
pub fn render(scene: &Scene, pose: &CameraPose, cfg: &SensorConfig) -> Result<Rendering, SceneError> {
    cfg.validate()?;
    check_camera(scene, pose)?;
    let far = FAR_PLANE_FRACTION * cfg.unambiguous_range();
    let (w, h) = (cfg.width, cfg.height);
    let mut depth = vec![0.0; w * h];
    let mut reflectivity = vec![0.0; w * h];
    let mut hit = vec![false; w * h];
    depth
        .par_chunks_mut(w)
        .zip(reflectivity.par_chunks_mut(w))
        .zip(hit.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, ((d, r), m))| {
            for col in 0..w {
                match scene.cast(pose.origin, cfg.pixel_ray(row, col)) {
                    Some((t, rho)) => {
                        d[col] = t;
                        r[col] = rho;
                        m[col] = true;
                    }
                    None => d[col] = far,
                }
            }
        });
    Ok(Rendering {
        width: w,
        height: h,
        depth,
        reflectivity,
        hit,
    })
}

/// Ray-cast ground truth. Misses carry the far-plane depth and are marked invalid.
pub fn render_depth(scene: &Scene, pose: &CameraPose, cfg: &SensorConfig) -> Result<DepthMap, SceneError> {
    let r = render(scene, pose, cfg)?;
    Ok(DepthMap {
        width: r.width,
        height: r.height,
        depth: r.depth.iter().map(|&d| d as f32).collect(),
        valid: r.hit,
    })
}

/// Inverse-square return `source_power·ρ·exposure / d²`, saturating at `2·a_max`.
pub fn received_amplitude(rho: f64, depth_m: f64, cfg: &SensorConfig) -> f64 {
    let alpha = cfg.source_power * rho * cfg.exposure_us / (depth_m * depth_m);
    alpha.clamp(0.0, 2.0 * cfg.a_max)
}

/// Four correlation planes plus the ambient plane of one capture.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    /// Row-major `H×W×4`: the four phase samples of each pixel are adjacent.
    pub samples: Vec<f64>,
    /// Row-major `H×W` ambient (background) level.
    pub ambient: Vec<f64>,
    pub sensor: SensorConfig,
}

impl RawFrame {
    pub fn width(&self) -> usize {
        self.sensor.width
    }

    pub fn height(&self) -> usize {
        self.sensor.height
    }

    pub fn pixel(&self, idx: usize) -> [f64; 4] {
        let s = &self.samples[idx * 4..idx * 4 + 4];
        [s[0], s[1], s[2], s[3]]
    }

    /// All-zero frame with the given sensor.
    pub fn zeros(sensor: SensorConfig) -> Self {
        let n = sensor.pixel_count();
        Self {
            samples: vec![0.0; n * 4],
            ambient: vec![0.0; n],
            sensor,
        }
    }

    pub fn check_dims(&self) -> bool {
        let n = self.sensor.pixel_count();
        self.samples.len() == 4 * n && self.ambient.len() == n
    }
}

/// Deterministic per-pixel random stream.
fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

/// Mixes a seed with a tag into an independent seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn digitize(v: f64, cfg: &SensorConfig) -> f64 {
    if cfg.quantize {
        v.round().clamp(0.0, cfg.adc_full_scale)
    } else {
        v
    }
}

fn noisy(mean: f64, cfg: &SensorConfig, rng: &mut ChaCha8Rng) -> f64 {
    let var = cfg.photon_noise_gain * mean.max(0.0) + cfg.read_noise_sigma * cfg.read_noise_sigma;
    let z: f64 = rng.sample(StandardNormal);
    mean + var.sqrt() * z
}

/// Simulates one capture of `scene`.
///
/// Per pixel: inverse-square amplitude, phase from the ray-cast distance,
/// sample offset `α/2 + ambient_level·exposure·K_AMBIENT`, ideal correlation
/// samples, Gaussian noise with variance `gain·sample + read_noise²`, then
/// ADC quantization. Noise streams are keyed by `(seed, pixel index)`, so the
/// result does not depend on how rows are scheduled.
pub fn simulate_raw(
    scene: &Scene,
    pose: &CameraPose,
    cfg: &SensorConfig,
    seed: u64,
) -> Result<RawFrame, SceneError> {
    let geo = render(scene, pose, cfg)?;
    let modulation = cfg.modulation();
    let offset = scene.ambient_level * cfg.exposure_us * K_AMBIENT;
    let w = cfg.width;
    let mut frame = RawFrame::zeros(*cfg);
    frame
        .samples
        .par_chunks_mut(4 * w)
        .zip(frame.ambient.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (samples, ambient))| {
            for col in 0..w {
                let idx = row * w + col;
                let alpha = if geo.hit[idx] {
                    received_amplitude(geo.reflectivity[idx], geo.depth[idx], cfg)
                } else {
                    0.0
                };
                // The return is non-negative light, so it carries its own DC term α/2.
                let dc = offset + alpha / 2.0;
                let truth = PixelTruth::new(alpha, phase_from_depth(geo.depth[idx], &modulation), dc);
                let ideal = sample_correlation(&truth).to_array();
                let mut rng = pixel_rng(seed, idx);
                for (k, &c) in ideal.iter().enumerate() {
                    samples[4 * col + k] = digitize(noisy(c, cfg, &mut rng), cfg);
                }
                ambient[col] = digitize(noisy(offset, cfg, &mut rng), cfg);
            }
        });
    Ok(frame)
}

/// Short-exposure input paired with long-exposure classical ground truth.
#[allow(clippy::too_many_arguments)]
pub fn make_pair(
    scene: &Scene,
    pose: &CameraPose,
    cfg_short: &SensorConfig,
    cfg_long: &SensorConfig,
    mask: &MaskConfig,
    seed: u64,
    scene_id: u32,
) -> Result<DatasetSample, SceneError> {
    if !(cfg_short.exposure_us < cfg_long.exposure_us) {
        return Err(SceneError::ExposureOrder {
            short: cfg_short.exposure_us,
            long: cfg_long.exposure_us,
        });
    }
    if (cfg_short.width, cfg_short.height, cfg_short.fov_deg, cfg_short.mod_freq_hz)
        != (cfg_long.width, cfg_long.height, cfg_long.fov_deg, cfg_long.mod_freq_hz)
    {
        return Err(SceneError::InvalidSensor(
            "short and long captures must share geometry and modulation".into(),
        ));
    }
    let raw_short = simulate_raw(scene, pose, cfg_short, seed)?;
    let raw_long = simulate_raw(scene, pose, cfg_long, derive_seed(seed, 1))?;
    let depth_gt = reconstruct(&raw_long, mask);
    Ok(DatasetSample {
        raw_short,
        depth_gt,
        meta: SampleMeta {
            scene_id,
            exposure_short_us: cfg_short.exposure_us,
            exposure_long_us: cfg_long.exposure_us,
            seed,
        },
    })
}
