//! Depth error metrics, corpus evaluation and the distance sweep.

use thiserror::Error;

use crate::classic::{reconstruct, DepthMap, MaskConfig};
use crate::dataset::DatasetSample;
use crate::neural::{infer, Network, NeuralError};
use crate::scene::{derive_seed, make_pair, CameraPose, RawFrame, Scene, SceneError, SensorConfig, Vec3};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask selects no valid pixels")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{width}×{height} image is smaller than the {window}×{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("no samples to evaluate")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn check_congruent(a: &DepthMap, b: &DepthMap) -> Result<(), MetricsError> {
    if (a.width, a.height) != (b.width, b.height) || a.depth.len() != b.depth.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean absolute error in centimeters over `mask`-valid pixels.
pub fn mae_cm(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<f64, MetricsError> {
    check_congruent(pred, gt)?;
    if mask.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch(format!("mask of {} for {} pixels", mask.len(), gt.len())));
    }
    let (sum, n) = pred
        .depth
        .iter()
        .zip(&gt.depth)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((&p, &g), _)| (s + (p as f64 - g as f64).abs(), n + 1));
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(100.0 * sum / n as f64)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable "valid" filtering: output is `(w−k+1)×(h−k+1)`.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11×11 Gaussian window (σ = 1.5).
pub fn ssim_planes(a: &[f64], b: &[f64], width: usize, height: usize, dynamic_range: f64) -> Result<f64, MetricsError> {
    if a.len() != width * height || b.len() != width * height {
        return Err(MetricsError::ShapeMismatch("plane sizes differ".into()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            width,
            height,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, width, height, &k);
    let mu_b = filter_valid(b, width, height, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), width, height, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), width, height, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), width, height, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two depth maps after scaling by `1/d_max` (dynamic range 1).
/// Pixels invalid in `gt` are set to 0 in both maps first.
pub fn ssim(pred: &DepthMap, gt: &DepthMap, d_max: f64) -> Result<f64, MetricsError> {
    check_congruent(pred, gt)?;
    let plane = |m: &DepthMap| -> Vec<f64> {
        m.depth
            .iter()
            .zip(&gt.valid)
            .map(|(&d, &v)| if v { d as f64 / d_max } else { 0.0 })
            .collect()
    };
    ssim_planes(&plane(pred), &plane(gt), gt.width, gt.height, 1.0)
}

/// Anything that turns a raw frame into a depth map.
pub trait DepthPredictor {
    fn name(&self) -> &str;
    fn predict(&mut self, raw: &RawFrame) -> Result<DepthMap, MetricsError>;
}

/// The classical pipeline as a predictor.
#[derive(Debug, Clone)]
pub struct Classical {
    pub mask: MaskConfig,
}

impl DepthPredictor for Classical {
    fn name(&self) -> &str {
        "classical"
    }

    fn predict(&mut self, raw: &RawFrame) -> Result<DepthMap, MetricsError> {
        Ok(reconstruct(raw, &self.mask))
    }
}

impl DepthPredictor for Network<f32> {
    fn name(&self) -> &str {
        "neural"
    }

    fn predict(&mut self, raw: &RawFrame) -> Result<DepthMap, MetricsError> {
        Ok(infer(self, raw)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub scene_id: u32,
    pub mae_cm: f64,
    pub ssim: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Mean of the per-sample values.
    pub mae_cm: f64,
    pub ssim: f64,
    pub n_pixels_evaluated: usize,
    pub per_sample: Vec<SampleScore>,
}

/// Scores `predictor` on every sample against its long-exposure label.
/// Samples whose label has no valid pixel are skipped.
pub fn evaluate(
    predictor: &mut dyn DepthPredictor,
    samples: &[DatasetSample],
    d_max: f64,
) -> Result<EvalReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        if s.depth_gt.valid_count() == 0 {
            continue;
        }
        let pred = predictor.predict(&s.raw_short)?;
        per_sample.push(SampleScore {
            scene_id: s.meta.scene_id,
            mae_cm: mae_cm(&pred, &s.depth_gt, &s.depth_gt.valid)?,
            ssim: ssim(&pred, &s.depth_gt, d_max)?,
            n_pixels: s.depth_gt.valid_count(),
        });
    }
    if per_sample.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let n = per_sample.len() as f64;
    Ok(EvalReport {
        method: predictor.name().to_string(),
        mae_cm: per_sample.iter().map(|s| s.mae_cm).sum::<f64>() / n,
        ssim: per_sample.iter().map(|s| s.ssim).sum::<f64>() / n,
        n_pixels_evaluated: per_sample.iter().map(|s| s.n_pixels).sum(),
        per_sample,
    })
}

/// Tab-separated table: one row per method and sample, then one summary row per method.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut s = String::from("method\tsample\tmae_cm\tssim\tn_pixels\n");
    for r in reports {
        for p in &r.per_sample {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{}\n",
                r.method, p.scene_id, p.mae_cm, p.ssim, p.n_pixels
            ));
        }
    }
    for r in reports {
        s.push_str(&format!(
            "summary\t{}\t{:.6}\t{:.6}\t{}\n",
            r.method, r.mae_cm, r.ssim, r.n_pixels_evaluated
        ));
    }
    s
}

/// Running mean and population variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub distances_m: Vec<f64>,
    pub mae_cm: Vec<f64>,
    pub mean_cm: f64,
    /// Population variance of the series (cm²).
    pub variance_cm2: f64,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("distance_m\tmae_cm\n");
        for (d, m) in self.distances_m.iter().zip(&self.mae_cm) {
            s.push_str(&format!("{d:.4}\t{m:.6}\n"));
        }
        s.push_str(&format!("mean_cm\t{:.6}\nvariance_cm2\t{:.6}\n", self.mean_cm, self.variance_cm2));
        s
    }
}

/// Observes `scene` with the camera pulled back along −z by each distance,
/// and scores the predictor's short-exposure depth against the long-exposure
/// classical depth on its valid pixels.
#[allow(clippy::too_many_arguments)]
pub fn distance_sweep(
    predictor: &mut dyn DepthPredictor,
    scene: &Scene,
    distances_m: &[f64],
    cfg_short: &SensorConfig,
    cfg_long: &SensorConfig,
    mask: &MaskConfig,
    seed: u64,
) -> Result<SweepReport, MetricsError> {
    if distances_m.len() < 2 {
        return Err(MetricsError::InvalidArgument("a sweep needs at least 2 distances".into()));
    }
    let range = cfg_short.unambiguous_range();
    if let Some(d) = distances_m.iter().find(|d| !(d.is_finite() && d.abs() < range)) {
        return Err(MetricsError::InvalidArgument(format!(
            "distance {d} m outside the unambiguous range {range:.3} m"
        )));
    }
    let mut stats = RunningStats::default();
    let mut series = Vec::with_capacity(distances_m.len());
    for (i, &d) in distances_m.iter().enumerate() {
        let pose = CameraPose::at(Vec3::new(0.0, 0.0, -d));
        let pair = make_pair(scene, &pose, cfg_short, cfg_long, mask, derive_seed(seed, i as u64), 0)?;
        let pred = predictor.predict(&pair.raw_short)?;
        let m = mae_cm(&pred, &pair.depth_gt, &pair.depth_gt.valid)?;
        stats.push(m);
        series.push(m);
    }
    Ok(SweepReport {
        distances_m: distances_m.to_vec(),
        mae_cm: series,
        mean_cm: stats.mean,
        variance_cm2: stats.variance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(depth: Vec<f32>, w: usize, h: usize) -> DepthMap {
        DepthMap {
            width: w,
            height: h,
            valid: vec![true; depth.len()],
            depth,
        }
    }

    #[test]
    fn mae_examples() {
        let gt = map(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(mae_cm(&gt, &gt, &gt.valid).unwrap(), 0.0);
        let off = map(gt.depth.iter().map(|d| d + 0.05).collect(), 2, 2);
        assert!((mae_cm(&off, &gt, &gt.valid).unwrap() - 5.0).abs() < 1e-4);
        let mixed = map(vec![1.02, 2.02, 3.9, 4.9], 2, 2);
        let mask = [true, true, false, false];
        assert!((mae_cm(&mixed, &gt, &mask).unwrap() - 2.0).abs() < 1e-4);
        assert!(matches!(mae_cm(&gt, &gt, &[false; 4]), Err(MetricsError::EmptyMask)));
    }

    /// Independent SSIM: a full 2-D Gaussian window evaluated per position.
    fn naive_ssim(a: &[f64], b: &[f64], w: usize, h: usize, l: f64) -> f64 {
        let r = 5isize;
        let mut g = [[0.0; 11]; 11];
        let mut total = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for cy in r..h as isize - r {
            for cx in r..w as isize - r {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = g[(dy + r) as usize][(dx + r) as usize] / total;
                        let idx = ((cy + dy) as usize) * w + (cx + dx) as usize;
                        ma += wgt * a[idx];
                        mb += wgt * b[idx];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = g[(dy + r) as usize][(dx + r) as usize] / total;
                        let idx = ((cy + dy) as usize) * w + (cx + dx) as usize;
                        va += wgt * (a[idx] - ma).powi(2);
                        vb += wgt * (b[idx] - mb).powi(2);
                        cov += wgt * (a[idx] - ma) * (b[idx] - mb);
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a: Vec<f64> = (0..32 * 32).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = a.iter().map(|&v| (v + 0.2 * rng.random::<f64>() - 0.1).clamp(0.0, 1.0)).collect();
            let fast = ssim_planes(&a, &b, 32, 32, 1.0).unwrap();
            let slow = naive_ssim(&a, &b, 32, 32, 1.0);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_identity_and_too_small() {
        let a: Vec<f64> = (0..400).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!((ssim_planes(&a, &a, 20, 20, 1.0).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(
            ssim_planes(&a[..100], &a[..100], 10, 10, 1.0),
            Err(MetricsError::TooSmall { .. })
        ));
        let mut b = a.clone();
        b[210] += 0.5;
        assert!(ssim_planes(&a, &b, 20, 20, 1.0).unwrap() < 1.0);
    }

    #[test]
    fn depth_ssim_zeroes_label_holes() {
        let mut gt = map(vec![2.0; 256], 16, 16);
        gt.valid[40] = false;
        let mut pred = gt.clone();
        pred.depth[40] = 7.0;
        assert!((ssim(&pred, &gt, 7.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [4.8, 2.5, 3.3, 9.1, 0.0, 7.25];
        let mut s = RunningStats::default();
        xs.iter().for_each(|&x| s.push(x));
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.variance() - var).abs() < 1e-12);
    }

    fn sweep_scene() -> Scene {
        Scene {
            primitives: vec![
                crate::scene::Primitive::plane(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0), 0.6),
                crate::scene::Primitive::sphere(Vec3::new(0.2, 0.1, 2.0), 0.4, 0.9),
            ],
            ambient_level: 0.1,
        }
    }

    #[test]
    fn noiseless_sweep_with_perfect_stub_is_zero() {
        let short = SensorConfig::default().with_size(32, 24).noiseless();
        let long = short.with_exposure(4000.0);
        let lenient = MaskConfig {
            amp_threshold_ratio: 1e-12,
            amr_threshold: 1e12,
            ..MaskConfig::default()
        };
        let distances: Vec<f64> = (0..10).map(|i| i as f64 * 0.2).collect();
        let mut stub = Classical { mask: lenient };
        let r = distance_sweep(&mut stub, &sweep_scene(), &distances, &short, &long, &lenient, 3).unwrap();
        assert_eq!(r.mae_cm, vec![0.0; 10]);
        assert_eq!((r.mean_cm, r.variance_cm2), (0.0, 0.0));
    }

    #[test]
    fn sweep_rejects_bad_distances() {
        let short = SensorConfig::default().with_size(16, 16);
        let long = short.with_exposure(4000.0);
        let mut c = Classical { mask: MaskConfig::default() };
        let m = MaskConfig::default();
        assert!(distance_sweep(&mut c, &sweep_scene(), &[1.0], &short, &long, &m, 0).is_err());
        assert!(distance_sweep(&mut c, &sweep_scene(), &[0.0, 30.0], &short, &long, &m, 0).is_err());
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..16 * 16).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..16 * 16).map(|_| rng.random::<f64>()).collect();
            let ab = ssim_planes(&a, &b, 16, 16, 1.0).unwrap();
            let ba = ssim_planes(&b, &a, 16, 16, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
        }

        #[test]
        fn mae_detects_translation(seed in any::<u64>(), c in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = map((0..64).map(|_| rng.random_range(0.5f32..5.0)).collect(), 8, 8);
            let pred = map(gt.depth.iter().map(|&d| d + rng.random_range(0.0f32..0.3)).collect(), 8, 8);
            let shifted = map(pred.depth.iter().map(|&d| (d as f64 + c) as f32).collect(), 8, 8);
            let base = mae_cm(&pred, &gt, &gt.valid).unwrap();
            let moved = mae_cm(&shifted, &gt, &gt.valid).unwrap();
            prop_assert!((moved - base - 100.0 * c).abs() < 1e-3);
        }
    }
}
