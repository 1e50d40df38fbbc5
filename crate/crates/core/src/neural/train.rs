//! Training and inference loops.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::loss::l1_masked_loss;
use super::network::{Network, NetworkConfig, SPATIAL_MULTIPLE};
use super::optim::{lr_schedule, Adam, AdamConfig};
use super::tensor::{Scalar, Tensor};
use super::NeuralError;
use crate::classic::DepthMap;
use crate::dataset::DatasetSample;
use crate::scene::RawFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub flat_epochs: usize,
    pub decay_epochs: usize,
    /// Epochs actually run; defaults to the full schedule.
    pub epochs: usize,
    pub crop: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            flat_epochs: 200,
            decay_epochs: 1800,
            epochs: 2000,
            crop: 128,
            batch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_std: 0.02,
            seed: 0,
            checkpoint_interval: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let ok = self.lr0.is_finite()
            && self.lr0 >= 0.0
            && self.decay_epochs > 0
            && self.crop > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0
            && self.init_std >= 0.0
            && (self.checkpoint_interval == 0 || self.checkpoint_dir.is_some());
        if ok {
            Ok(())
        } else {
            Err(NeuralError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr0, self.flat_epochs, self.decay_epochs)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// `2·d/d_max − 1`.
pub fn normalize_depth(d: f64, d_max: f64) -> Result<f64, NeuralError> {
    if !(0.0..=d_max).contains(&d) {
        return Err(NeuralError::OutOfRange { value: d, max: d_max });
    }
    Ok(2.0 * d / d_max - 1.0)
}

pub fn denormalize_depth(v: f64, d_max: f64) -> Result<f64, NeuralError> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(NeuralError::OutOfRange { value: v, max: 1.0 });
    }
    Ok((v + 1.0) * d_max / 2.0)
}

fn crop_plane<T: Copy>(src: &[T], width: usize, x: usize, y: usize, cw: usize, ch: usize, stride: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(cw * ch * stride);
    for row in y..y + ch {
        let start = (row * width + x) * stride;
        out.extend_from_slice(&src[start..start + cw * stride]);
    }
    out
}

/// Crops a raw frame and its labels with the same offset.
pub fn crop_sample(sample: &DatasetSample, x: usize, y: usize, crop: usize) -> Result<DatasetSample, NeuralError> {
    let (w, h) = (sample.raw_short.width(), sample.raw_short.height());
    if crop > w || crop > h || x + crop > w || y + crop > h {
        return Err(NeuralError::CropTooLarge {
            crop,
            width: w,
            height: h,
        });
    }
    let raw = &sample.raw_short;
    let gt = &sample.depth_gt;
    Ok(DatasetSample {
        raw_short: RawFrame {
            samples: crop_plane(&raw.samples, w, x, y, crop, crop, 4),
            ambient: crop_plane(&raw.ambient, w, x, y, crop, crop, 1),
            sensor: raw.sensor.with_size(crop, crop),
        },
        depth_gt: DepthMap {
            width: crop,
            height: crop,
            depth: crop_plane(&gt.depth, w, x, y, crop, crop, 1),
            valid: crop_plane(&gt.valid, w, x, y, crop, crop, 1),
        },
        meta: sample.meta,
    })
}

/// Uniformly placed `crop×crop` window.
pub fn random_crop(sample: &DatasetSample, crop: usize, rng: &mut impl Rng) -> Result<DatasetSample, NeuralError> {
    let (w, h) = (sample.raw_short.width(), sample.raw_short.height());
    if crop > w || crop > h {
        return Err(NeuralError::CropTooLarge {
            crop,
            width: w,
            height: h,
        });
    }
    let x = rng.random_range(0..=w - crop);
    let y = rng.random_range(0..=h - crop);
    crop_sample(sample, x, y, crop)
}

/// Raw samples as a `[4, H, W]` channel-planar block scaled by `1/adc_full_scale`.
pub fn raw_planes<T: Scalar>(raw: &RawFrame) -> Vec<T> {
    let n = raw.sensor.pixel_count();
    let scale = 1.0 / raw.sensor.adc_full_scale;
    let mut out = vec![T::zero(); 4 * n];
    for i in 0..n {
        for k in 0..4 {
            out[k * n + i] = T::from_f64(raw.samples[4 * i + k] * scale);
        }
    }
    out
}

/// Normalized label plane and loss mask. Labels outside `[0, d_max]` are masked out.
pub fn depth_target<T: Scalar>(gt: &DepthMap, d_max: f64) -> (Vec<T>, Vec<bool>) {
    gt.depth
        .iter()
        .zip(&gt.valid)
        .map(|(&d, &v)| match normalize_depth(d as f64, d_max) {
            Ok(t) if v => (T::from_f64(t), true),
            _ => (T::zero(), false),
        })
        .unzip()
}

/// Stacks equally sized samples into network input, target and mask.
pub fn make_batch<T: Scalar>(
    samples: &[DatasetSample],
    d_max: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<bool>), NeuralError> {
    let first = samples.first().ok_or(NeuralError::EmptyDataset)?;
    let (w, h) = (first.raw_short.width(), first.raw_short.height());
    let mut input = Vec::with_capacity(samples.len() * 4 * w * h);
    let mut target = Vec::with_capacity(samples.len() * w * h);
    let mut mask = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if (s.raw_short.width(), s.raw_short.height()) != (w, h)
            || (s.depth_gt.width, s.depth_gt.height) != (w, h)
        {
            return Err(NeuralError::ShapeMismatch("batch samples differ in size".into()));
        }
        input.extend(raw_planes::<T>(&s.raw_short));
        let (t, m) = depth_target::<T>(&s.depth_gt, d_max);
        target.extend(t);
        mask.extend(m);
    }
    let n = samples.len();
    Ok((
        Tensor::from_vec(&[n, 4, h, w], input)?,
        Tensor::from_vec(&[n, 1, h, w], target)?,
        mask,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Valid-pixel-weighted mean masked L1 over the epoch's batches (normalized units).
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub history: Vec<EpochRecord>,
}

pub fn format_history(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\tlr\ttrain_loss\tval_loss\n");
    for r in history {
        let val = r.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.8}"));
        s.push_str(&format!("{}\t{:.6e}\t{:.8}\t{}\n", r.epoch, r.lr, r.train_loss, val));
    }
    s
}

/// One optimization step on a batch. Returns the loss, or `None` when the
/// batch has no valid label pixel.
fn train_step(
    net: &mut Network<f32>,
    adam: &mut Adam<f32>,
    batch: &[DatasetSample],
    lr: f64,
) -> Result<Option<(f64, usize)>, NeuralError> {
    let d_max = net.config().depth_max_m;
    let (input, target, mask) = make_batch::<f32>(batch, d_max)?;
    if !mask.iter().any(|&m| m) {
        return Ok(None);
    }
    let pred = net.forward(&input)?;
    let out = l1_masked_loss(&pred, &target, &mask)?;
    net.zero_grad();
    net.backward(&out.grad)?;
    adam.step(net.params_mut(), lr);
    Ok(Some((out.loss, out.valid_pixels)))
}

/// Masked L1 of full-frame predictions (normalized units), valid-pixel weighted.
pub fn validation_loss(net: &mut Network<f32>, samples: &[DatasetSample]) -> Result<Option<f64>, NeuralError> {
    let d_max = net.config().depth_max_m;
    let (mut total, mut count) = (0.0, 0usize);
    for s in samples {
        let pred = predict_normalized(net, &s.raw_short)?;
        let (target, mask) = depth_target::<f32>(&s.depth_gt, d_max);
        for ((&p, &t), &m) in pred.iter().zip(&target).zip(&mask) {
            if m {
                total += (p as f64 - t as f64).abs();
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Trains a fresh network. `on_epoch` sees every finished epoch.
pub fn train(
    train_set: &[DatasetSample],
    val_set: &[DatasetSample],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Network<f32>),
) -> Result<TrainOutcome, NeuralError> {
    if train_set.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    cfg.validate()?;
    net_cfg.validate()?;
    if net_cfg.in_channels != 4 {
        return Err(NeuralError::InvalidConfig("raw input needs 4 channels".into()));
    }
    for s in train_set {
        let (w, h) = (s.raw_short.width(), s.raw_short.height());
        if cfg.crop > w || cfg.crop > h {
            return Err(NeuralError::CropTooLarge {
                crop: cfg.crop,
                width: w,
                height: h,
            });
        }
    }
    if !cfg.crop.is_multiple_of(SPATIAL_MULTIPLE) {
        return Err(NeuralError::InvalidConfig(format!(
            "crop {} is not a multiple of {SPATIAL_MULTIPLE}",
            cfg.crop
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<f32>::new(*net_cfg, cfg.init_std, &mut rng)?;
    let mut adam = Adam::new(cfg.adam());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        order.shuffle(&mut rng);
        let (mut weighted, mut pixels) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| random_crop(&train_set[i], cfg.crop, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some((loss, valid)) = train_step(&mut net, &mut adam, &batch, lr)? {
                weighted += loss * valid as f64;
                pixels += valid;
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: if pixels == 0 { 0.0 } else { weighted / pixels as f64 },
            val_loss: if val_set.is_empty() {
                None
            } else {
                validation_loss(&mut net, val_set)?
            },
        };
        history.push(record);
        on_epoch(&record, &net);
        if cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("epoch_{:05}.tofw", epoch + 1));
                checkpoint::save(&path, &net).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
            }
        }
    }
    Ok(TrainOutcome { network: net, history })
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn padded_size(n: usize) -> usize {
    n.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE
}

/// Full-frame network output in normalized units, one value per pixel.
/// Frames are reflect-padded up to the spatial multiple and cropped back.
pub fn predict_normalized(net: &mut Network<f32>, raw: &RawFrame) -> Result<Vec<f32>, NeuralError> {
    let (w, h) = (raw.width(), raw.height());
    let (pw, ph) = (padded_size(w), padded_size(h));
    let planes = raw_planes::<f32>(raw);
    let n = w * h;
    let mut input = vec![0.0f32; 4 * pw * ph];
    for k in 0..4 {
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                input[k * pw * ph + y * pw + x] = planes[k * n + sy * w + reflect(x as isize, w)];
            }
        }
    }
    let out = net.forward(&Tensor::from_vec(&[1, 4, ph, pw], input)?)?;
    let c = net.config().out_channels;
    let mut pred = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let sum: f32 = (0..c).map(|ch| out.data()[ch * pw * ph + y * pw + x]).sum();
            pred[y * w + x] = sum / c as f32;
        }
    }
    Ok(pred)
}

/// Dense depth from one raw frame. Every pixel is marked valid.
pub fn infer(net: &mut Network<f32>, raw: &RawFrame) -> Result<DepthMap, NeuralError> {
    if net.config().in_channels != 4 {
        return Err(NeuralError::InvalidConfig("raw input needs 4 channels".into()));
    }
    let d_max = net.config().depth_max_m;
    let pred = predict_normalized(net, raw)?;
    let depth = pred
        .iter()
        .map(|&v| (((v as f64).clamp(-1.0, 1.0) + 1.0) * d_max / 2.0).clamp(0.0, d_max) as f32)
        .collect();
    Ok(DepthMap {
        width: raw.width(),
        height: raw.height(),
        depth,
        valid: vec![true; raw.sensor.pixel_count()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SampleMeta;
    use crate::scene::SensorConfig;

    fn indexed_sample(w: usize, h: usize) -> DatasetSample {
        let n = w * h;
        let mut raw = RawFrame::zeros(SensorConfig::default().with_size(w, h));
        for i in 0..n {
            for k in 0..4 {
                raw.samples[4 * i + k] = (i * 4 + k) as f64;
            }
            raw.ambient[i] = i as f64;
        }
        DatasetSample {
            raw_short: raw,
            depth_gt: DepthMap {
                width: w,
                height: h,
                depth: (0..n).map(|i| i as f32).collect(),
                valid: (0..n).map(|i| i % 3 == 0).collect(),
            },
            meta: SampleMeta {
                scene_id: 0,
                exposure_short_us: 200.0,
                exposure_long_us: 4000.0,
                seed: 0,
            },
        }
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_depth(0.0, 7.5).unwrap(), -1.0);
        assert_eq!(normalize_depth(7.5, 7.5).unwrap(), 1.0);
        assert_eq!(normalize_depth(3.75, 7.5).unwrap(), 0.0);
        assert!(normalize_depth(-0.1, 7.5).is_err());
        assert!(normalize_depth(7.6, 7.5).is_err());
        assert!(denormalize_depth(1.5, 7.5).is_err());
    }

    #[test]
    fn crop_offsets_cover_the_valid_range() {
        let s = indexed_sample(320, 240);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut max_x, mut max_y) = (0, 0);
        for _ in 0..2000 {
            let c = random_crop(&s, 128, &mut rng).unwrap();
            let first = c.depth_gt.depth[0] as usize;
            let (x, y) = (first % 320, first / 320);
            assert!(x <= 192 && y <= 112);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        assert!(max_x > 180 && max_y > 100);
    }

    #[test]
    fn crop_is_congruent() {
        let s = indexed_sample(40, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = random_crop(&s, 16, &mut rng).unwrap();
            for i in 0..256 {
                let src = c.depth_gt.depth[i] as usize;
                assert_eq!(c.raw_short.ambient[i], src as f64);
                assert_eq!(c.raw_short.samples[4 * i + 2], (src * 4 + 2) as f64);
                assert_eq!(c.depth_gt.valid[i], src % 3 == 0);
            }
        }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let s = indexed_sample(32, 16);
        let c = random_crop(&s, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c.raw_short.width(), 16);
        let s = indexed_sample(16, 16);
        assert_eq!(random_crop(&s, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), s);
        assert!(matches!(
            random_crop(&s, 17, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(NeuralError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn inference_output_range_and_size() {
        let cfg = NetworkConfig {
            base_width: 2,
            n_resblocks: 1,
            ..NetworkConfig::default()
        };
        let mut net = Network::<f32>::new(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let s = indexed_sample(21, 13);
        let mut raw = s.raw_short.clone();
        raw.samples.iter_mut().for_each(|v| *v = (*v % 4096.0) * 3.0);
        let d = infer(&mut net, &raw).unwrap();
        assert_eq!((d.width, d.height), (21, 13));
        assert!(d.valid.iter().all(|&v| v));
        assert!(d.depth.iter().all(|&v| (0.0..=7.5).contains(&v)));
        assert_eq!(infer(&mut net, &raw).unwrap(), d);
    }

    #[test]
    fn target_masks_out_of_range_labels() {
        let mut gt = DepthMap::new(3, 1);
        gt.depth = vec![1.0, 9.0, 2.0];
        gt.valid = vec![true, true, false];
        let (t, m) = depth_target::<f64>(&gt, 7.5);
        assert_eq!(m, vec![true, false, false]);
        assert!((t[0] - (2.0 / 7.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let r = train(&[], &[], &NetworkConfig::default(), &TrainConfig::default(), |_, _| {});
        assert!(matches!(r, Err(NeuralError::EmptyDataset)));
    }

    #[test]
    fn schedule_through_config() {
        let c = TrainConfig::default();
        assert_eq!(c.lr(0), 2e-4);
        assert_eq!(c.lr(1100), 1e-4);
        assert_eq!(c.lr(2000), 0.0);
    }
}
