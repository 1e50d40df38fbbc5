//! The conventional reconstruction: per-pixel demodulation with amplitude
//! and ambient-ratio (AMR) confidence masking. Rejected pixels become holes
//! with depth 0.

use crate::scene::RawFrame;
use crate::signal::{amplitude_from_samples, depth_from_phase, phase_from_samples, FourPhaseSamples};

/// Metric depth with a per-pixel validity flag.
///
/// Reconstructed maps store 0 at invalid pixels. Ray-cast maps from
/// [`crate::scene::render_depth`] keep the far-plane depth at misses.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Demodulated amplitude `α/2` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeMap {
    pub width: usize,
    pub height: usize,
    pub amp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// A pixel is rejected when its amplitude is below this fraction of `a_max`.
    pub amp_threshold_ratio: f64,
    /// Largest accepted ambient-to-modulated-light ratio.
    pub amr_threshold: f64,
    /// Weight of the amplitude term in the scalar quality score.
    pub combine_weight: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            amp_threshold_ratio: 0.024,
            amr_threshold: 16.0,
            combine_weight: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn is_valid(&self) -> bool {
        self.amp_threshold_ratio > 0.0
            && self.amp_threshold_ratio < 1.0
            && self.amr_threshold > 0.0
            && (0.0..=1.0).contains(&self.combine_weight)
    }
}

/// Validity mask and a `[0, 1]` quality score per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Confidence {
    pub valid: Vec<bool>,
    pub quality: Vec<f64>,
}

const AMR_EPS: f64 = 1e-12;

pub fn amplitude_map(raw: &RawFrame) -> AmplitudeMap {
    let n = raw.sensor.pixel_count();
    AmplitudeMap {
        width: raw.width(),
        height: raw.height(),
        amp: (0..n)
            .map(|i| amplitude_from_samples(&FourPhaseSamples::from_array(raw.pixel(i))))
            .collect(),
    }
}

/// Whether one pixel passes both tests. The amplitude comparison is strict:
/// an amplitude exactly at the threshold is accepted.
pub fn pixel_valid(amp: f64, ambient: f64, a_max: f64, cfg: &MaskConfig) -> bool {
    let amr = ambient / amp.max(AMR_EPS);
    amp.is_finite() && ambient.is_finite() && !(amp < cfg.amp_threshold_ratio * a_max) && !(amr > cfg.amr_threshold)
}

pub fn pixel_quality(amp: f64, ambient: f64, a_max: f64, cfg: &MaskConfig) -> f64 {
    if !(amp.is_finite() && ambient.is_finite()) {
        return 0.0;
    }
    let amr = ambient.max(0.0) / amp.max(AMR_EPS);
    let amp_score = (amp / a_max).clamp(0.0, 1.0);
    let amr_score = (1.0 - amr / cfg.amr_threshold).clamp(0.0, 1.0);
    cfg.combine_weight * amp_score + (1.0 - cfg.combine_weight) * amr_score
}

pub fn confidence_mask(amp: &AmplitudeMap, ambient: &[f64], cfg: &MaskConfig, a_max: f64) -> Confidence {
    assert_eq!(amp.amp.len(), ambient.len(), "amplitude and ambient planes differ in size");
    let (valid, quality) = amp
        .amp
        .iter()
        .zip(ambient)
        .map(|(&a, &e)| (pixel_valid(a, e, a_max, cfg), pixel_quality(a, e, a_max, cfg)))
        .unzip();
    Confidence { valid, quality }
}

/// Demodulates every pixel and masks out unreliable ones.
pub fn reconstruct(raw: &RawFrame, cfg: &MaskConfig) -> DepthMap {
    let modulation = raw.sensor.modulation();
    let a_max = raw.sensor.a_max;
    let mut out = DepthMap::new(raw.width(), raw.height());
    for i in 0..raw.sensor.pixel_count() {
        let s = FourPhaseSamples::from_array(raw.pixel(i));
        if !s.is_finite() {
            continue;
        }
        let amp = amplitude_from_samples(&s);
        if !pixel_valid(amp, raw.ambient[i], a_max, cfg) {
            continue;
        }
        let Ok(phase) = phase_from_samples(&s) else {
            continue;
        };
        let d = depth_from_phase(phase, &modulation) as f32;
        if d.is_finite() {
            out.depth[i] = d;
            out.valid[i] = true;
        }
    }
    out
}

/// Fraction of invalid pixels.
pub fn hole_fraction(d: &DepthMap) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    (d.len() - d.valid_count()) as f64 / d.len() as f64
}
