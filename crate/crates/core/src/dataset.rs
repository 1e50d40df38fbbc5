//! On-disk formats and corpus management.
//!
//! All binary files are little-endian with 32-bit floats:
//!
//! ```text
//! TOFR  "TOFR" u32 version, u32 width, u32 height, f32 mod_freq_hz,
//!       f32 exposure_us, f32 adc_full_scale, 4 sample planes, ambient plane
//! TOFD  "TOFD" u32 version, u32 width, u32 height, f32 depth plane,
//!       u8 validity plane
//! ```
//!
//! Planes are row-major. Manifests are UTF-8 text, one
//! `path<TAB>scene_id<TAB>split` line per sample, with `# key=value` header lines.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::classic::{hole_fraction, reconstruct, DepthMap, MaskConfig};
use crate::scene::{derive_seed, make_pair, CameraPose, Primitive, RawFrame, Scene, SceneError, SensorConfig, Vec3};

pub const RAW_MAGIC: &[u8; 4] = b"TOFR";
pub const DEPTH_MAGIC: &[u8; 4] = b"TOFD";
pub const FORMAT_VERSION: u32 = 1;
pub const RAW_HEADER_BYTES: usize = 28;
pub const DEPTH_HEADER_BYTES: usize = 16;
pub const RAW_EXT: &str = "tofr";
pub const DEPTH_EXT: &str = "tofd";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl DatasetError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Bookkeeping attached to every training pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub scene_id: u32,
    pub exposure_short_us: f64,
    pub exposure_long_us: f64,
    pub seed: u64,
}

/// Short-exposure raw input with long-exposure ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub raw_short: RawFrame,
    /// Classical reconstruction of the long exposure; its validity plane is the label mask.
    pub depth_gt: DepthMap,
    pub meta: SampleMeta,
}

impl DatasetSample {
    pub fn mask_gt(&self) -> &[bool] {
        &self.depth_gt.valid
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| DatasetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DatasetError::io(path, e)
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            DatasetError::Format(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32_plane(&mut self, n: usize) -> Result<Vec<f32>, DatasetError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| DatasetError::Format("plane too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<(), DatasetError> {
        let got = self.take(4)?;
        if got != want {
            return Err(DatasetError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(DatasetError::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), DatasetError> {
        if self.pos != self.buf.len() {
            return Err(DatasetError::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dims(r: &mut Reader) -> Result<(usize, usize), DatasetError> {
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    if w == 0 || h == 0 {
        return Err(DatasetError::Format(format!("empty frame {w}×{h}")));
    }
    Ok((w, h))
}

/// Serializes a frame. Values are stored as `f32`, so the round trip is exact
/// for frames whose samples are `f32`-representable (every quantized frame).
pub fn encode_raw(frame: &RawFrame) -> Vec<u8> {
    let (w, h) = (frame.width(), frame.height());
    let n = w * h;
    let mut out = Vec::with_capacity(RAW_HEADER_BYTES + 5 * n * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for v in [frame.sensor.mod_freq_hz, frame.sensor.exposure_us, frame.sensor.adc_full_scale] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for k in 0..4 {
        for i in 0..n {
            out.extend_from_slice(&(frame.samples[4 * i + k] as f32).to_le_bytes());
        }
    }
    for &a in &frame.ambient {
        out.extend_from_slice(&(a as f32).to_le_bytes());
    }
    out
}

/// Parses a TOFR buffer. Sensor fields not stored in the file take their
/// defaults, with `a_max = adc_full_scale / 2`.
pub fn decode_raw(bytes: &[u8]) -> Result<RawFrame, DatasetError> {
    let mut r = Reader::new(bytes);
    r.magic(RAW_MAGIC)?;
    let (w, h) = dims(&mut r)?;
    let mod_freq_hz = r.f32()? as f64;
    let exposure_us = r.f32()? as f64;
    let adc_full_scale = r.f32()? as f64;
    let n = w * h;
    let planes: Vec<Vec<f32>> = (0..4).map(|_| r.f32_plane(n)).collect::<Result<_, _>>()?;
    let ambient = r.f32_plane(n)?;
    r.finish()?;
    let sensor = SensorConfig {
        width: w,
        height: h,
        mod_freq_hz,
        exposure_us,
        adc_full_scale,
        a_max: adc_full_scale / 2.0,
        ..SensorConfig::default()
    };
    sensor
        .validate()
        .map_err(|e| DatasetError::Format(format!("header: {e}")))?;
    let mut samples = vec![0.0; 4 * n];
    for (k, plane) in planes.iter().enumerate() {
        for (i, &v) in plane.iter().enumerate() {
            samples[4 * i + k] = v as f64;
        }
    }
    Ok(RawFrame {
        samples,
        ambient: ambient.into_iter().map(f64::from).collect(),
        sensor,
    })
}

pub fn write_raw(path: &Path, frame: &RawFrame) -> Result<(), DatasetError> {
    write_atomic(path, &encode_raw(frame))
}

pub fn read_raw(path: &Path) -> Result<RawFrame, DatasetError> {
    decode_raw(&fs::read(path).map_err(|e| DatasetError::io(path, e))?)
}

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let n = d.width * d.height;
    let mut out = Vec::with_capacity(DEPTH_HEADER_BYTES + 5 * n);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.width as u32).to_le_bytes());
    out.extend_from_slice(&(d.height as u32).to_le_bytes());
    for &v in &d.depth {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(d.valid.iter().map(|&v| v as u8));
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap, DatasetError> {
    let mut r = Reader::new(bytes);
    r.magic(DEPTH_MAGIC)?;
    let (w, h) = dims(&mut r)?;
    let depth = r.f32_plane(w * h)?;
    let valid = r
        .take(w * h)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(DatasetError::Format(format!("validity byte {other}"))),
        })
        .collect::<Result<_, _>>()?;
    r.finish()?;
    Ok(DepthMap {
        width: w,
        height: h,
        depth,
        valid,
    })
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<(), DatasetError> {
    write_atomic(path, &encode_depth(d))
}

pub fn read_depth(path: &Path) -> Result<DepthMap, DatasetError> {
    decode_depth(&fs::read(path).map_err(|e| DatasetError::io(path, e))?)
}

/// Binary 16-bit PGM. `[0, scale]` maps linearly onto `[0, 65535]`, values
/// outside are clamped, and pixels flagged invalid are written as 0.
pub fn encode_pgm(plane: &[f32], width: usize, height: usize, valid: Option<&[bool]>, scale: f64) -> Vec<u8> {
    assert_eq!(plane.len(), width * height, "plane size");
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for (i, &v) in plane.iter().enumerate() {
        let ok = valid.is_none_or(|m| m[i]) && v.is_finite();
        let level = if ok {
            (v as f64 / scale * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        // PGM stores 16-bit samples most significant byte first.
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn export_pgm(
    path: &Path,
    plane: &[f32],
    width: usize,
    height: usize,
    valid: Option<&[bool]>,
    scale: f64,
) -> Result<(), DatasetError> {
    write_atomic(path, &encode_pgm(plane, width, height, valid, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Sample stem relative to the manifest directory; `.tofr`/`.tofd` are appended.
    pub path: String,
    pub scene_id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Ordered `key=value` header metadata.
    pub meta: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.path.is_empty() || e.path.contains('\t') || e.path.contains('\n') {
                return Err(DatasetError::Format(format!("bad sample path {:?}", e.path)));
            }
            if !seen.insert(e.path.as_str()) {
                return Err(DatasetError::Format(format!("duplicate sample path {:?}", e.path)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# tof-forge manifest v1\n");
        for (k, v) in &self.meta {
            s.push_str(&format!("# {k}={v}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.path, e.scene_id, e.split));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut m = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.trim().split_once('=') {
                    m.meta.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, scene, split] = fields[..] else {
                return Err(DatasetError::Format(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            };
            let scene_id = scene
                .parse()
                .map_err(|_| DatasetError::Format(format!("manifest line {}: bad scene id {scene:?}", lineno + 1)))?;
            m.entries.push(ManifestEntry {
                path: path.to_string(),
                scene_id,
                split: split.parse()?,
            });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Number of training scenes for `n` scenes at `ratio`, keeping both sides non-empty.
pub fn train_count(n: usize, ratio: f64) -> usize {
    if n < 2 {
        return n;
    }
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

/// Scene-level shuffle, then partition. Every entry of a scene lands on the same side.
pub fn split(
    manifest: &Manifest,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut scenes: Vec<u32> = manifest
        .entries
        .iter()
        .map(|e| e.scene_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_scenes: BTreeSet<u32> = scenes[..train_count(scenes.len(), ratio)].iter().copied().collect();
    let (train, test) = manifest
        .entries
        .iter()
        .cloned()
        .map(|mut e| {
            e.split = if train_scenes.contains(&e.scene_id) {
                Split::Train
            } else {
                Split::Test
            };
            e
        })
        .partition(|e| e.split == Split::Train);
    Ok((train, test))
}

/// Random indoor-like scene: a back wall, a floor, and a handful of spheres
/// and boxes with mixed reflectivity, some of them very dark.
pub fn random_scene(rng: &mut impl Rng) -> Scene {
    let mut primitives = Vec::new();
    let wall_z = rng.random_range(3.6..4.6);
    primitives.push(Primitive::plane(
        Vec3::new(0.0, 0.0, wall_z),
        Vec3::new(0.0, 0.0, -1.0),
        rng.random_range(0.25..0.9),
    ));
    let floor_y = rng.random_range(0.9..1.4);
    primitives.push(Primitive::plane(
        Vec3::new(0.0, floor_y, 0.0),
        Vec3::new(0.0, -1.0, 0.0),
        rng.random_range(0.2..0.7),
    ));
    let n_objects = rng.random_range(2..=5);
    for _ in 0..n_objects {
        let z = rng.random_range(1.2..wall_z - 0.3);
        let x = rng.random_range(-0.5..0.5) * z;
        let rho = if rng.random_bool(0.25) {
            rng.random_range(0.02..0.08)
        } else {
            rng.random_range(0.15..1.0)
        };
        if rng.random_bool(0.5) {
            let r = rng.random_range(0.15..0.5);
            let y = rng.random_range(-0.3 * z..(floor_y - r).max(-0.3 * z + 0.01));
            primitives.push(Primitive::sphere(Vec3::new(x, y, z), r, rho));
        } else {
            let half = Vec3::new(
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.6),
                rng.random_range(0.1..0.4),
            );
            let y = rng.random_range(-0.3 * z..(floor_y - half.y).max(-0.3 * z + 0.01));
            let c = Vec3::new(x, y, z + half.z);
            primitives.push(Primitive::aabb(c - half, c + half, rho));
        }
    }
    Scene {
        primitives,
        ambient_level: rng.random_range(0.05..0.25),
    }
}

/// Summary of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub samples: usize,
    pub depth_min_m: f64,
    pub depth_max_m: f64,
    pub depth_mean_m: f64,
    /// Mean classical hole fraction of the short-exposure inputs.
    pub short_hole_fraction: f64,
    /// Mean invalid fraction of the ground-truth labels.
    pub label_hole_fraction: f64,
}

impl CorpusStats {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a DatasetSample>, mask: &MaskConfig) -> Self {
        let (mut lo, mut hi, mut sum, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        let (mut short_holes, mut label_holes, mut n) = (0.0, 0.0, 0usize);
        for s in samples {
            for (&d, &v) in s.depth_gt.depth.iter().zip(&s.depth_gt.valid) {
                if v {
                    let d = d as f64;
                    lo = lo.min(d);
                    hi = hi.max(d);
                    sum += d;
                    count += 1;
                }
            }
            short_holes += hole_fraction(&reconstruct(&s.raw_short, mask));
            label_holes += hole_fraction(&s.depth_gt);
            n += 1;
        }
        let div = |v: f64, k: usize| if k == 0 { 0.0 } else { v / k as f64 };
        Self {
            samples: n,
            depth_min_m: if count == 0 { 0.0 } else { lo },
            depth_max_m: if count == 0 { 0.0 } else { hi },
            depth_mean_m: div(sum, count),
            short_hole_fraction: div(short_holes, n),
            label_hole_fraction: div(label_holes, n),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "samples\t{}\ndepth_min_m\t{:.6}\ndepth_max_m\t{:.6}\ndepth_mean_m\t{:.6}\nshort_hole_fraction\t{:.6}\nlabel_hole_fraction\t{:.6}\n",
            self.samples,
            self.depth_min_m,
            self.depth_max_m,
            self.depth_mean_m,
            self.short_hole_fraction,
            self.label_hole_fraction
        )
    }
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_scenes: usize,
    pub short: SensorConfig,
    pub long: SensorConfig,
    pub mask: MaskConfig,
    pub split_ratio: f64,
    pub seed: u64,
}

/// Builds the `index`-th pair of a corpus. Pure function of `(spec, index)`.
pub fn corpus_sample(spec: &CorpusSpec, index: usize) -> Result<DatasetSample, DatasetError> {
    let scene_seed = derive_seed(spec.seed, index as u64);
    let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(scene_seed));
    Ok(make_pair(
        &scene,
        &CameraPose::default(),
        &spec.short,
        &spec.long,
        &spec.mask,
        derive_seed(scene_seed, 0x5EED),
        index as u32,
    )?)
}

/// Generates every sample of a corpus in memory with its split assignment.
pub fn generate_samples(spec: &CorpusSpec) -> Result<Vec<(DatasetSample, Split)>, DatasetError> {
    if spec.n_scenes < 2 {
        return Err(DatasetError::InvalidArgument(format!(
            "need at least 2 scenes to form a train/test split, got {}",
            spec.n_scenes
        )));
    }
    let samples: Vec<DatasetSample> = (0..spec.n_scenes)
        .into_par_iter()
        .map(|i| corpus_sample(spec, i))
        .collect::<Result<_, _>>()?;
    let manifest = Manifest {
        meta: Vec::new(),
        entries: (0..spec.n_scenes)
            .map(|i| ManifestEntry {
                path: sample_stem(i),
                scene_id: i as u32,
                split: Split::Train,
            })
            .collect(),
    };
    let (_, test) = split(&manifest, spec.split_ratio, derive_seed(spec.seed, 0x5917))?;
    let test_ids: BTreeSet<u32> = test.iter().map(|e| e.scene_id).collect();
    Ok(samples
        .into_iter()
        .map(|s| {
            let tag = if test_ids.contains(&s.meta.scene_id) {
                Split::Test
            } else {
                Split::Train
            };
            (s, tag)
        })
        .collect())
}

pub fn sample_stem(index: usize) -> String {
    format!("samples/scene_{index:04}")
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const STATS_FILE: &str = "stats.txt";

/// Generates a corpus under `out_dir`: sample files, `manifest.txt` and `stats.txt`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<(Manifest, CorpusStats), DatasetError> {
    let samples = generate_samples(spec)?;
    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| DatasetError::io(&sample_dir, e))?;
    samples.par_iter().try_for_each(|(s, _)| {
        let stem = out_dir.join(sample_stem(s.meta.scene_id as usize));
        write_raw(&stem.with_extension(RAW_EXT), &s.raw_short)?;
        write_depth(&stem.with_extension(DEPTH_EXT), &s.depth_gt)
    })?;
    let mut manifest = Manifest::default();
    manifest.set_meta("scenes", spec.n_scenes);
    manifest.set_meta("split_ratio", spec.split_ratio);
    manifest.set_meta("seed", spec.seed);
    manifest.set_meta("exposure_short_us", spec.short.exposure_us);
    manifest.set_meta("exposure_long_us", spec.long.exposure_us);
    manifest.entries = samples
        .iter()
        .map(|(s, tag)| ManifestEntry {
            path: sample_stem(s.meta.scene_id as usize),
            scene_id: s.meta.scene_id,
            split: *tag,
        })
        .collect();
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let stats = CorpusStats::from_samples(samples.iter().map(|(s, _)| s), &spec.mask);
    write_atomic(&out_dir.join(STATS_FILE), stats.to_text().as_bytes())?;
    Ok((manifest, stats))
}

/// Loads one manifest entry; `root` is the manifest's directory.
pub fn load_sample(root: &Path, manifest: &Manifest, entry: &ManifestEntry) -> Result<DatasetSample, DatasetError> {
    let stem = root.join(&entry.path);
    let raw_short = read_raw(&stem.with_extension(RAW_EXT))?;
    let depth_gt = read_depth(&stem.with_extension(DEPTH_EXT))?;
    if (depth_gt.width, depth_gt.height) != (raw_short.width(), raw_short.height()) {
        return Err(DatasetError::Format(format!(
            "{}: raw and depth sizes differ",
            entry.path
        )));
    }
    let meta_f64 = |k: &str| manifest.get_meta(k).and_then(|v| v.parse::<f64>().ok());
    Ok(DatasetSample {
        meta: SampleMeta {
            scene_id: entry.scene_id,
            exposure_short_us: raw_short.sensor.exposure_us,
            exposure_long_us: meta_f64("exposure_long_us").unwrap_or(f64::NAN),
            seed: manifest.get_meta("seed").and_then(|v| v.parse().ok()).unwrap_or(0),
        },
        raw_short,
        depth_gt,
    })
}

pub fn load_split(manifest_path: &Path, split: Split) -> Result<(Manifest, Vec<DatasetSample>), DatasetError> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .entries_in(split)
        .map(|e| load_sample(root, &manifest, e))
        .collect::<Result<_, _>>()?;
    Ok((manifest, samples))
}
