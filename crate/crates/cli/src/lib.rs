//! Batch commands over the `tof_forge` library.
//!
//! Every command records its full flag set, defaults included, as a config
//! snapshot next to its outputs. [`snapshot_args`] turns a snapshot back into
//! an argument list that reproduces the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tof_forge::classic::{hole_fraction, reconstruct, MaskConfig};
use tof_forge::dataset::{
    export_pgm, generate_corpus, load_split, random_scene, read_raw, write_atomic, write_depth, CorpusSpec, Manifest,
    Split, MANIFEST_FILE,
};
use tof_forge::metrics::{distance_sweep, evaluate, format_reports, Classical};
use tof_forge::neural::checkpoint;
use tof_forge::neural::train::format_history;
use tof_forge::neural::{infer, train, NetworkConfig, TrainConfig};
use tof_forge::scene::SensorConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const CONFIG_SUFFIX: &str = ".config.txt";
pub const MODEL_FILE: &str = "model.tofw";
pub const LOSS_FILE: &str = "loss.txt";
pub const THREADS_ENV: &str = "TOF_FORGE_THREADS";

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "tof-forge", version, about = "Synthetic ToF depth workbench")]
pub struct Cli {
    /// Worker threads; 0 runs single-threaded.
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of short-exposure frames and long-exposure labels.
    DatasetGen(DatasetGenArgs),
    /// Classical depth from one raw frame.
    Reconstruct(ReconstructArgs),
    /// Train a network on the train split of a manifest.
    Train(TrainArgs),
    /// Network depth from one raw frame.
    Infer(InferArgs),
    /// Classical and neural scores on one split of a manifest.
    Eval(EvalArgs),
    /// Per-distance error of a network on one scene.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct SensorArgs {
    #[arg(long, default_value_t = SensorConfig::default().width)]
    pub width: usize,
    #[arg(long, default_value_t = SensorConfig::default().height)]
    pub height: usize,
    #[arg(long, default_value_t = SensorConfig::default().mod_freq_hz)]
    pub mod_freq_hz: f64,
    #[arg(long, default_value_t = SensorConfig::default().adc_full_scale)]
    pub adc_full_scale: f64,
    #[arg(long, default_value_t = SensorConfig::default().a_max)]
    pub a_max: f64,
    #[arg(long, default_value_t = SensorConfig::default().read_noise_sigma)]
    pub read_noise_sigma: f64,
    #[arg(long, default_value_t = SensorConfig::default().photon_noise_gain)]
    pub photon_noise_gain: f64,
    #[arg(long, default_value_t = SensorConfig::default().source_power)]
    pub source_power: f64,
    #[arg(long, default_value_t = SensorConfig::default().fov_deg)]
    pub fov_deg: f64,
    #[arg(long, default_value_t = SensorConfig::default().quantize, action = clap::ArgAction::Set)]
    pub quantize: bool,
}

impl SensorArgs {
    pub fn config(&self, exposure_us: f64) -> SensorConfig {
        SensorConfig {
            width: self.width,
            height: self.height,
            mod_freq_hz: self.mod_freq_hz,
            exposure_us,
            adc_full_scale: self.adc_full_scale,
            a_max: self.a_max,
            read_noise_sigma: self.read_noise_sigma,
            photon_noise_gain: self.photon_noise_gain,
            source_power: self.source_power,
            fov_deg: self.fov_deg,
            quantize: self.quantize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct MaskArgs {
    #[arg(long, default_value_t = MaskConfig::default().amp_threshold_ratio)]
    pub amp_threshold_ratio: f64,
    #[arg(long, default_value_t = MaskConfig::default().amr_threshold)]
    pub amr_threshold: f64,
    #[arg(long, default_value_t = MaskConfig::default().combine_weight)]
    pub combine_weight: f64,
}

impl MaskArgs {
    pub fn config(&self) -> Result<MaskConfig> {
        let cfg = MaskConfig {
            amp_threshold_ratio: self.amp_threshold_ratio,
            amr_threshold: self.amr_threshold,
            combine_weight: self.combine_weight,
        };
        if !cfg.is_valid() {
            bail!("invalid mask config {cfg:?}");
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct DatasetGenArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 200.0)]
    pub exposure_short: f64,
    #[arg(long, default_value_t = 4000.0)]
    pub exposure_long: f64,
    #[arg(long, default_value_t = 0.75)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sensor: SensorArgs,
    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional 16-bit PGM preview.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Depth in meters mapped to full white in the preview.
    #[arg(long, default_value_t = NetworkConfig::default().depth_max_m)]
    pub pgm_scale: f64,
    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct NetArgs {
    #[arg(long, default_value_t = NetworkConfig::default().out_channels)]
    pub out_channels: usize,
    #[arg(long, default_value_t = NetworkConfig::default().base_width)]
    pub base_width: usize,
    #[arg(long, default_value_t = NetworkConfig::default().n_resblocks)]
    pub n_resblocks: usize,
    #[arg(long, default_value_t = NetworkConfig::default().leaky_slope)]
    pub leaky_slope: f64,
    #[arg(long, default_value_t = NetworkConfig::default().depth_max_m)]
    pub depth_max_m: f64,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr0)]
    pub lr0: f64,
    #[arg(long, default_value_t = TrainConfig::default().flat_epochs)]
    pub flat_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().decay_epochs)]
    pub decay_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().crop)]
    pub crop: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().adam_beta1)]
    pub adam_beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_beta2)]
    pub adam_beta2: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_eps)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = TrainConfig::default().init_std)]
    pub init_std: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    /// Save `checkpoints/epoch_NNNNN.tofw` every this many epochs; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: usize,
    /// Compute the test-split loss after every epoch.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub validate: bool,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Preview white level in meters; defaults to the network's depth range.
    #[arg(long)]
    pub pgm_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Camera pull-back distances in meters, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub distances: Vec<f64>,
    /// Seed of the random scene being observed.
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
    #[arg(long, default_value_t = 200.0)]
    pub exposure_short: f64,
    #[arg(long, default_value_t = 4000.0)]
    pub exposure_long: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sensor: SensorArgs,
    #[command(flatten)]
    pub mask: MaskArgs,
}

/// Flag values of the invoked subcommand as ordered `key=value` metadata,
/// defaults included. Multi-valued flags are comma joined.
pub fn snapshot(matches: &ArgMatches) -> Manifest {
    let mut snap = Manifest::default();
    let Some((name, sub)) = matches.subcommand() else {
        return snap;
    };
    snap.set_meta("command", name);
    let cmd = Cli::command();
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    if let Ok(Some(threads)) = sub.try_get_raw("threads") {
        let v: Vec<_> = threads.map(|v| v.to_string_lossy().into_owned()).collect();
        snap.set_meta("threads", v.join(","));
    }
    for arg in sub_cmd.get_arguments() {
        let (Some(long), id) = (arg.get_long(), arg.get_id()) else {
            continue;
        };
        if long == "threads" {
            continue;
        }
        if let Ok(Some(vals)) = sub.try_get_raw(id.as_str()) {
            let v: Vec<_> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            snap.set_meta(long, v.join(","));
        }
    }
    snap
}

/// Argument list that reproduces the run a snapshot was taken from.
pub fn snapshot_args(snap: &Manifest) -> Result<Vec<OsString>> {
    let command = snap.get_meta("command").context("config snapshot has no command")?;
    let mut args: Vec<OsString> = vec!["tof-forge".into(), command.into()];
    for (k, v) in &snap.meta {
        if k != "command" {
            args.push(format!("--{k}").into());
            args.push(v.into());
        }
    }
    Ok(args)
}

fn config_text(snap: &Manifest) -> String {
    snap.to_text().replacen("manifest v1", "config v1", 1)
}

fn write_snapshot(snap: &Manifest, path: &Path) -> Result<()> {
    Ok(write_atomic(path, config_text(snap).as_bytes())?)
}

/// Snapshot path for a command whose output is a single file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(CONFIG_SUFFIX);
    out.with_file_name(name)
}

pub fn read_snapshot(path: &Path) -> Result<Manifest> {
    Ok(Manifest::read(path)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Parses `args` and runs the command inside a pool sized by `--threads`.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command().try_get_matches_from(args)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let snap = snapshot(&matches);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
        .context("building thread pool")?;
    pool.install(|| execute(&cli.command, &snap))
}

/// Runs one command and returns its stdout summary.
pub fn execute(command: &Command, snap: &Manifest) -> Result<String> {
    match command {
        Command::DatasetGen(a) => dataset_gen(a, snap),
        Command::Reconstruct(a) => cmd_reconstruct(a, snap),
        Command::Train(a) => cmd_train(a, snap),
        Command::Infer(a) => cmd_infer(a, snap),
        Command::Eval(a) => cmd_eval(a, snap),
        Command::Sweep(a) => cmd_sweep(a, snap),
    }
}

fn dataset_gen(a: &DatasetGenArgs, snap: &Manifest) -> Result<String> {
    if a.exposure_short >= a.exposure_long {
        bail!(
            "short exposure {} µs must be below long exposure {} µs",
            a.exposure_short,
            a.exposure_long
        );
    }
    if !(a.split_ratio > 0.0 && a.split_ratio < 1.0) {
        bail!("split ratio {} outside (0, 1)", a.split_ratio);
    }
    let spec = CorpusSpec {
        n_scenes: a.scenes,
        short: a.sensor.config(a.exposure_short),
        long: a.sensor.config(a.exposure_long),
        mask: a.mask.config()?,
        split_ratio: a.split_ratio,
        seed: a.seed,
    };
    spec.short.validate()?;
    let (manifest, stats) = generate_corpus(&spec, &a.out)?;
    write_snapshot(snap, &a.out.join(CONFIG_FILE))?;
    let n_train = manifest.entries_in(Split::Train).count();
    Ok(format!(
        "{} samples ({} train / {} test) in {}\n{}",
        manifest.entries.len(),
        n_train,
        manifest.entries.len() - n_train,
        a.out.display(),
        stats.to_text()
    ))
}

fn cmd_reconstruct(a: &ReconstructArgs, snap: &Manifest) -> Result<String> {
    let raw = read_raw(&a.raw)?;
    let depth = reconstruct(&raw, &a.mask.config()?);
    ensure_parent(&a.out)?;
    write_depth(&a.out, &depth)?;
    if let Some(pgm) = &a.pgm {
        export_pgm(pgm, &depth.depth, depth.width, depth.height, Some(&depth.valid), a.pgm_scale)?;
    }
    write_snapshot(snap, &sidecar(&a.out))?;
    Ok(format!("hole_fraction\t{:.6}\n", hole_fraction(&depth)))
}

fn cmd_train(a: &TrainArgs, snap: &Manifest) -> Result<String> {
    let (_, train_set) = load_split(&a.manifest, Split::Train)?;
    if train_set.is_empty() {
        bail!("{} has no training samples", a.manifest.display());
    }
    let val_set = if a.validate {
        load_split(&a.manifest, Split::Test)?.1
    } else {
        Vec::new()
    };
    let net_cfg = NetworkConfig {
        in_channels: 4,
        out_channels: a.net.out_channels,
        base_width: a.net.base_width,
        n_resblocks: a.net.n_resblocks,
        leaky_slope: a.net.leaky_slope,
        depth_max_m: a.net.depth_max_m,
    };
    let cfg = TrainConfig {
        lr0: a.lr0,
        flat_epochs: a.flat_epochs,
        decay_epochs: a.decay_epochs,
        epochs: a.epochs,
        crop: a.crop,
        batch_size: a.batch_size,
        adam_beta1: a.adam_beta1,
        adam_beta2: a.adam_beta2,
        adam_eps: a.adam_eps,
        init_std: a.init_std,
        seed: a.seed,
        checkpoint_interval: a.checkpoint_interval,
        checkpoint_dir: (a.checkpoint_interval > 0).then(|| a.out.join("checkpoints")),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_snapshot(snap, &a.out.join(CONFIG_FILE))?;
    let outcome = train(&train_set, &val_set, &net_cfg, &cfg, |_, _| {})?;
    checkpoint::save(&a.out.join(MODEL_FILE), &outcome.network)?;
    write_atomic(&a.out.join(LOSS_FILE), format_history(&outcome.history).as_bytes())?;
    let last = outcome.history.last().map_or(f64::NAN, |r| r.train_loss);
    Ok(format!(
        "trained {} epochs on {} samples, final loss {last:.6}\n",
        outcome.history.len(),
        train_set.len()
    ))
}

fn cmd_infer(a: &InferArgs, snap: &Manifest) -> Result<String> {
    let mut net = checkpoint::load(&a.ckpt)?;
    let raw = read_raw(&a.raw)?;
    let depth = infer(&mut net, &raw)?;
    ensure_parent(&a.out)?;
    write_depth(&a.out, &depth)?;
    if let Some(pgm) = &a.pgm {
        let scale = a.pgm_scale.unwrap_or(net.config().depth_max_m);
        export_pgm(pgm, &depth.depth, depth.width, depth.height, None, scale)?;
    }
    write_snapshot(snap, &sidecar(&a.out))?;
    Ok(format!("{}×{} depth written to {}\n", depth.width, depth.height, a.out.display()))
}

fn cmd_eval(a: &EvalArgs, snap: &Manifest) -> Result<String> {
    let mut net = checkpoint::load(&a.ckpt)?;
    let (_, samples) = load_split(&a.manifest, a.split)?;
    let d_max = net.config().depth_max_m;
    let classical = evaluate(&mut Classical { mask: a.mask.config()? }, &samples, d_max)?;
    let neural = evaluate(&mut net, &samples, d_max)?;
    let text = format_reports(&[classical, neural]);
    ensure_parent(&a.out)?;
    write_atomic(&a.out, text.as_bytes())?;
    write_snapshot(snap, &sidecar(&a.out))?;
    Ok(text.lines().filter(|l| l.starts_with("summary")).map(|l| format!("{l}\n")).collect())
}

fn cmd_sweep(a: &SweepArgs, snap: &Manifest) -> Result<String> {
    let mut net = checkpoint::load(&a.ckpt)?;
    let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(a.scene_seed));
    let report = distance_sweep(
        &mut net,
        &scene,
        &a.distances,
        &a.sensor.config(a.exposure_short),
        &a.sensor.config(a.exposure_long),
        &a.mask.config()?,
        a.seed,
    )?;
    let text = report.to_text();
    ensure_parent(&a.out)?;
    write_atomic(&a.out, text.as_bytes())?;
    write_snapshot(snap, &sidecar(&a.out))?;
    Ok(text)
}

/// Default manifest path inside a corpus directory.
pub fn manifest_path(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> (Cli, Manifest) {
        let m = Cli::command().try_get_matches_from(args).unwrap();
        (Cli::from_arg_matches(&m).unwrap(), snapshot(&m))
    }

    #[test]
    fn snapshot_round_trips_through_text() {
        let cases: [&[&str]; 3] = [
            &["tof-forge", "dataset-gen", "--scenes", "80", "--seed", "7", "--out", "/tmp/c"],
            &["tof-forge", "--threads", "3", "train", "--manifest", "m.txt", "--out", "o", "--lr0", "0.001"],
            &["tof-forge", "sweep", "--ckpt", "a", "--distances", "0,0.5,1.25", "--out", "s.txt", "--quantize", "false"],
        ];
        for args in cases {
            let (cli, snap) = parse(args);
            let text = config_text(&snap);
            let back = Manifest::parse(&text).unwrap();
            assert_eq!(back, snap);
            let replay = Cli::try_parse_from(snapshot_args(&back).unwrap()).unwrap();
            assert_eq!(replay, cli, "{args:?}");
        }
    }

    #[test]
    fn snapshot_records_defaults() {
        let (_, snap) = parse(&["tof-forge", "train", "--manifest", "m", "--out", "o"]);
        assert_eq!(snap.get_meta("command"), Some("train"));
        assert_eq!(snap.get_meta("lr0"), Some("0.0002"));
        assert_eq!(snap.get_meta("flat-epochs"), Some("200"));
        assert_eq!(snap.get_meta("base-width"), Some("64"));
        assert_eq!(snap.get_meta("threads"), Some("0"));
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(Cli::try_parse_from(["tof-forge", "train", "--manifest", "m", "--out", "o", "--lr", "1"]).is_err());
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("out/d.tofd")), PathBuf::from("out/d.tofd.config.txt"));
    }
}
