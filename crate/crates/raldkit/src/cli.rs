//! Command-line front end.
//!
//! One executable, nine subcommands, one JSON config. Every run:
//!
//! 1. loads the config (`--config`, or the built-in desk profile), applies
//!    `--set key.path=value` overrides in order, then `--seed`;
//! 2. takes an exclusive lock on the run root (`--out`, default `.`) so
//!    concurrent runs can't interleave writes;
//! 3. records the fully-resolved config as `resolved_config.json` in the
//!    run root, so the run can be replayed without the original flags;
//! 4. dispatches. Success exits 0; any failure prints a single JSON object
//!    `{code, message, context}` to stderr and exits 1.
//!
//! Relative paths in `paths.*` resolve against the run root. Worker-thread
//! count comes from `--threads`, then `RALDKIT_THREADS`, then all cores.
//!
//! Seed policy: the top-level `seed` drives dataset synthesis, generation,
//! and evaluation subsampling; the training stages draw from their own
//! `train_*.seed` fields so retraining one stage never perturbs another.
//! `--seed N` overrides the top-level seed only; stage seeds are reachable
//! with `--set train_ae.seed=N` etc.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};

use crate::autoenc::{prepare_frames, train_autoencoder, AeConfig, AeError};
use crate::config::{load_config, write_resolved, ConfigError, RunConfig, RunPaths};
use crate::diffusion::{
    prepare_dm_frames, read_dm_config, train_diffusion, CondSource, DiffusionError, LatentStats,
};
use crate::geom::ply::{write_ply, PlyError};
use crate::geom::GeomError;
use crate::metrics::{cdf_csv, cdf_svg, evaluate_dirs, MetricsError};
use crate::nn::ckpt::{load_checkpoint, CkptError};
use crate::pipeline::{frame_stem, load_artifacts, run_ablation, AblationArtifacts, AblationVariant, PipelineError};
use crate::radar::{cfar_to_points, os_cfar, RadarError};
use crate::scene::{build_dataset, load_split, read_manifest, DatasetManifest, SceneError};

#[derive(Parser, Debug)]
#[command(name = "raldkit", version, about = "Radar-conditioned 3D point cloud generation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Run config JSON (default: built-in desk profile).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the config's top-level seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Run root; relative config paths resolve against it (default: .).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set train_dm.lr=0.005 (repeatable).
    #[arg(long = "set", global = true, value_name = "K=V", action = ArgAction::Append)]
    pub set: Vec<String>,
    /// Worker threads (fallback: RALDKIT_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Dataset operations.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Train the point-cloud autoencoder on the train split.
    TrainAe,
    /// Train the latent diffusion model on top of the autoencoder.
    TrainDm,
    /// Continue training an existing diffusion checkpoint (new data, few epochs).
    FineTune,
    /// Sample point clouds for the test split from radar spectra.
    Generate,
    /// Detector-only baseline point clouds for the test split.
    BaselineCfar,
    /// Compare predicted clouds against ground truth; write metric CSVs.
    Eval,
    /// Error-CDF report (CSV + SVG) over the configured metric series.
    ReportCdf,
    /// Run the conditioning/initialization ablations on the test split.
    Ablate,
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Synthesize scenes, render frames, and write the manifest.
    Build,
}

/// Failure surfaced to the shell: a stable code, a human message, and a
/// free-form context object rendered as one JSON value on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
    pub context: Value,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), context: json!({}) }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.context[key] = value.into();
        self
    }

    pub fn to_json(&self) -> String {
        json!({ "code": self.code, "message": self.message, "context": self.context })
            .to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! error_code {
    ($ty:ty, $code:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($code, e.to_string())
            }
        }
    };
}

error_code!(ConfigError, "config");
error_code!(SceneError, "dataset");
error_code!(AeError, "autoencoder");
error_code!(DiffusionError, "diffusion");
error_code!(MetricsError, "eval");
error_code!(RadarError, "radar");
error_code!(PlyError, "io");
error_code!(GeomError, "geometry");
error_code!(io::Error, "io");
error_code!(CkptError, "checkpoint");

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::CheckpointMismatch { .. }
            | PipelineError::WrongKind { .. }
            | PipelineError::MissingParent
            | PipelineError::Ckpt(_) => "checkpoint",
            _ => "pipeline",
        };
        CliError::new(code, e.to_string())
    }
}

/// Exclusive ownership of a run root for the duration of one subcommand.
/// The lock file names its owner; it is removed on drop (including panics).
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(root: &Path, what: &str) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        let path = root.join(".raldkit.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use io::Write as _;
                let _ = writeln!(f, "{} pid {}", what, std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(CliError::new(
                    "lock_held",
                    "another run owns this directory; remove the lock file if that run is dead",
                )
                .with("path", path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn thread_count(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| std::env::var("RALDKIT_THREADS").ok().and_then(|s| s.parse().ok()))
        .filter(|&n| n > 0)
}

fn init_threads(flag: Option<usize>) {
    if let Some(n) = thread_count(flag) {
        // A second init in the same process keeps the first pool; that is
        // fine for the CLI (one run per process) and for tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Entry point for the binary. Parses argv itself so usage errors also
/// come out as machine-readable JSON.
pub fn main_entry() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::new("usage", e.to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::FAILURE;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", CliError::new("usage", e.to_string()).to_json());
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}

/// Execute one parsed invocation. Separated from [`main_entry`] so tests
/// can drive the CLI in-process.
pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads(cli.common.threads);

    let mut cfg = load_config(cli.common.config.as_deref(), &cli.common.set)?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    let root = cli.common.out.unwrap_or_else(|| PathBuf::from("."));
    let what = subcommand_name(&cli.cmd);
    let _lock = RunLock::acquire(&root, what)?;
    write_resolved(&cfg, &root)?;
    let paths = cfg.paths.resolved(&root);

    match cli.cmd {
        Cmd::Dataset { cmd: DatasetCmd::Build } => cmd_dataset_build(&cfg, &paths),
        Cmd::TrainAe => cmd_train_ae(&cfg, &paths),
        Cmd::TrainDm => cmd_train_dm(&cfg, &paths, false),
        Cmd::FineTune => cmd_train_dm(&cfg, &paths, true),
        Cmd::Generate => cmd_generate(&cfg, &paths),
        Cmd::BaselineCfar => cmd_baseline_cfar(&cfg, &paths),
        Cmd::Eval => cmd_eval(&cfg, &paths),
        Cmd::ReportCdf => cmd_report_cdf(&cfg, &paths, &root),
        Cmd::Ablate => cmd_ablate(&cfg, &paths),
    }
}

fn subcommand_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Dataset { .. } => "dataset build",
        Cmd::TrainAe => "train-ae",
        Cmd::TrainDm => "train-dm",
        Cmd::FineTune => "fine-tune",
        Cmd::Generate => "generate",
        Cmd::BaselineCfar => "baseline-cfar",
        Cmd::Eval => "eval",
        Cmd::ReportCdf => "report-cdf",
        Cmd::Ablate => "ablate",
    }
}

/// The manifest records the geometry the dataset was built with; later
/// stages assume the config's geometry. Catch drift before it turns into
/// shape errors deep inside a model.
fn check_manifest_geometry(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<(), CliError> {
    let pairs = [
        ("fov_lidar", serde_json::to_value(&manifest.config.fov_lidar), serde_json::to_value(&cfg.dataset.fov_lidar)),
        ("fov_radar", serde_json::to_value(&manifest.config.fov_radar), serde_json::to_value(&cfg.dataset.fov_radar)),
    ];
    for (name, built, wanted) in pairs {
        let (built, wanted) = (built.map_err(ConfigError::from)?, wanted.map_err(ConfigError::from)?);
        if built != wanted {
            return Err(CliError::new(
                "config",
                format!("dataset was built with a different {name}; rebuild it or match the config"),
            )
            .with("built", built)
            .with("configured", wanted));
        }
    }
    Ok(())
}

/// Which diffusion checkpoint a conditioning source trains into / loads from.
fn dm_base_for<'a>(cfg: &RunConfig, paths: &'a RunPaths) -> &'a Path {
    match cfg.dm.cond_source {
        CondSource::RawSpectrum => &paths.dm_raw_ckpt,
        _ => &paths.dm_ckpt,
    }
}

fn cmd_dataset_build(cfg: &RunConfig, paths: &RunPaths) -> Result<(), CliError> {
    let manifest = build_dataset(&cfg.dataset, cfg.seed, &paths.dataset_dir)?;
    println!(
        "dataset: {} scenes, {} frames -> {}",
        cfg.dataset.n_scenes,
        manifest.frames.len(),
        paths.dataset_dir.display()
    );
    Ok(())
}

fn cmd_train_ae(cfg: &RunConfig, paths: &RunPaths) -> Result<(), CliError> {
    let manifest = read_manifest(&paths.dataset_dir)?;
    check_manifest_geometry(cfg, &manifest)?;
    let frames = load_split(&paths.dataset_dir, &manifest, "train")?;
    let ae_frames = prepare_frames(&cfg.ae, &cfg.dataset.fov_lidar, &frames)?;
    let norm = crate::geom::NormalizeMap::from_fov(&cfg.dataset.fov_lidar)?;
    let (_store, report) =
        train_autoencoder(&cfg.ae, &cfg.train_ae, &norm, &ae_frames, Some(&paths.ae_ckpt))?;
    write_curve(&paths.ae_ckpt, &report.epoch_loss)?;
    println!(
        "train-ae: {} epochs on {} frames, final loss {:.6}, checkpoint {}",
        cfg.train_ae.epochs,
        ae_frames.len(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.digest.as_deref().unwrap_or("-")
    );
    Ok(())
}

// The curve file sits next to the checkpoint: <base>_curve.csv. Wall-clock
// timings stay out of it so re-runs stay byte-identical.
fn write_curve(ckpt_base: &Path, epoch_loss: &[f64]) -> Result<(), CliError> {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in epoch_loss.iter().enumerate() {
        s.push_str(&format!("{e},{l}\n"));
    }
    let mut name = ckpt_base.file_name().unwrap_or_default().to_os_string();
    name.push("_curve.csv");
    let path = ckpt_base.with_file_name(name);
    fs::write(&path, s)?;
    Ok(())
}

fn cmd_train_dm(cfg: &RunConfig, paths: &RunPaths, fine_tune: bool) -> Result<(), CliError> {
    let manifest = read_manifest(&paths.dataset_dir)?;
    check_manifest_geometry(cfg, &manifest)?;
    let frames = load_split(&paths.dataset_dir, &manifest, "train")?;

    let (ae_meta, ae_store, ae_digest) = load_checkpoint(&paths.ae_ckpt)?;
    if ae_meta.kind != "autoencoder" {
        return Err(CliError::new("checkpoint", "expected an autoencoder checkpoint")
            .with("path", paths.ae_ckpt.display().to_string())
            .with("kind", ae_meta.kind.clone()));
    }
    let ae_cfg: AeConfig = serde_json::from_value(ae_meta.config["ae"].clone())
        .map_err(|e| CliError::new("checkpoint", format!("autoencoder config in checkpoint: {e}")))?;
    let stats = LatentStats::from_ae_config(&ae_meta.config)?;
    let norm = crate::geom::NormalizeMap::from_fov(&cfg.dataset.fov_lidar)?;

    let tr = if fine_tune { &cfg.fine_tune } else { &cfg.train_dm };
    let dm_frames = prepare_dm_frames(&ae_store, &ae_cfg, &stats, &norm, &frames, tr.seed)?;

    let (dm_cfg, warm, out_base, label) = if fine_tune {
        let donor_base = dm_base_for(cfg, paths);
        let (dm_meta, dm_store, _) = load_checkpoint(donor_base)?;
        if dm_meta.kind != "diffusion" {
            return Err(CliError::new("checkpoint", "expected a diffusion checkpoint")
                .with("path", donor_base.display().to_string())
                .with("kind", dm_meta.kind.clone()));
        }
        if dm_meta.parent_digest.as_deref() != Some(ae_digest.as_str()) {
            return Err(CliError::new(
                "checkpoint",
                "diffusion checkpoint was trained against a different autoencoder",
            )
            .with("expected", ae_digest.clone())
            .with("found", dm_meta.parent_digest.clone().unwrap_or_default()));
        }
        // The donor fixes the architecture; the config only picks the donor.
        let dm_cfg = read_dm_config(&dm_meta)?;
        (dm_cfg, Some(dm_store), paths.tuned_ckpt.clone(), "fine-tune")
    } else {
        (cfg.dm.clone(), None, dm_base_for(cfg, paths).to_path_buf(), "train-dm")
    };

    let (_store, report) =
        train_diffusion(&dm_cfg, tr, &dm_frames, Some(&ae_digest), warm, Some(&out_base))?;
    write_curve(&out_base, &report.epoch_loss)?;
    println!(
        "{label}: {} epochs on {} frames, final loss {:.6}, checkpoint {}",
        tr.epochs,
        dm_frames.len(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.digest.as_deref().unwrap_or("-")
    );
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, paths: &RunPaths) -> Result<(), CliError> {
    let manifest = read_manifest(&paths.dataset_dir)?;
    check_manifest_geometry(cfg, &manifest)?;
    let frames = load_split(&paths.dataset_dir, &manifest, "test")?;
    let art = load_artifacts(&paths.ae_ckpt, dm_base_for(cfg, paths), &cfg.dataset.fov_lidar)?;
    let results = crate::pipeline::generate_split(&art, &frames, &cfg.generate, cfg.seed, &paths.pred_dir)?;
    let total: usize = results.iter().map(|(_, r)| r.cloud.points.len()).sum();
    println!(
        "generate: {} frames -> {} ({} points total)",
        results.len(),
        paths.pred_dir.display(),
        total
    );
    Ok(())
}

fn cmd_baseline_cfar(cfg: &RunConfig, paths: &RunPaths) -> Result<(), CliError> {
    let manifest = read_manifest(&paths.dataset_dir)?;
    check_manifest_geometry(cfg, &manifest)?;
    let frames = load_split(&paths.dataset_dir, &manifest, "test")?;
    fs::create_dir_all(&paths.baseline_dir)?;
    let mut total = 0usize;
    for f in &frames {
        let dets = os_cfar(&f.spectrum, &cfg.baseline)?;
        let pc = cfar_to_points(&f.spectrum.fov, &dets);
        total += pc.points.len();
        let name = format!("{}.ply", frame_stem(f.entry.scene, f.entry.frame));
        write_ply(&paths.baseline_dir.join(name), &pc)?;
    }
    println!(
        "baseline-cfar: {} frames -> {} ({} points total)",
        frames.len(),
        paths.baseline_dir.display(),
        total
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, paths: &RunPaths) -> Result<(), CliError> {
    let gt_dir = paths.dataset_dir.join("frames");
    let report = evaluate_dirs(&paths.pred_dir, &gt_dir, &cfg.emd, cfg.seed)?;
    for (s, f) in &report.missing_pred {
        eprintln!("warning: no prediction for scene {s} frame {f}");
    }
    for (s, f) in &report.missing_gt {
        eprintln!("warning: no ground truth for scene {s} frame {f}");
    }
    let base = paths
        .pred_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pred".into());
    fs::create_dir_all(&paths.metrics_dir)?;
    let csv_path = paths.metrics_dir.join(format!("{base}_metrics.csv"));
    fs::write(&csv_path, report.csv())?;
    let summary = report.summary()?;
    let mut text = serde_json::to_string_pretty(&summary).map_err(ConfigError::from)?;
    text.push('\n');
    fs::write(paths.metrics_dir.join(format!("{base}_summary.json")), text)?;
    println!(
        "eval: {} pairs, mean CD {:.4} m, mean EMD {:.4} m -> {}",
        summary.n_frames,
        summary.mean_chamfer,
        summary.mean_emd,
        csv_path.display()
    );
    Ok(())
}

fn cmd_report_cdf(cfg: &RunConfig, paths: &RunPaths, root: &Path) -> Result<(), CliError> {
    if cfg.report.is_empty() {
        return Err(CliError::new("config", "report series list is empty"));
    }
    let mut cd_series: Vec<(String, Vec<f64>)> = Vec::new();
    let mut emd_series: Vec<(String, Vec<f64>)> = Vec::new();
    for series in &cfg.report {
        let path = if series.csv.is_absolute() { series.csv.clone() } else { root.join(&series.csv) };
        if !path.is_file() {
            return Err(CliError::new("missing_input", "metrics CSV not found; run `eval` first")
                .with("path", path.display().to_string())
                .with("label", series.label.clone()));
        }
        let text = fs::read_to_string(&path)?;
        let (cd, emd) = parse_metric_columns(&text)
            .ok_or_else(|| {
                CliError::new("eval", "metrics CSV missing cd_m/emd_m columns")
                    .with("path", path.display().to_string())
            })?;
        cd_series.push((series.label.clone(), cd));
        emd_series.push((series.label.clone(), emd));
    }
    fs::create_dir_all(&paths.metrics_dir)?;
    for (name, series, title) in [
        ("cd", &cd_series, "Chamfer distance CDF"),
        ("emd", &emd_series, "Earth mover's distance CDF"),
    ] {
        fs::write(paths.metrics_dir.join(format!("cdf_{name}.csv")), cdf_csv(series))?;
        let svg = cdf_svg(series, title, "error (m)");
        fs::write(paths.metrics_dir.join(format!("cdf_{name}.svg")), svg)?;
    }
    println!(
        "report-cdf: {} series -> {}",
        cfg.report.len(),
        paths.metrics_dir.join("cdf_{cd,emd}.{csv,svg}").display()
    );
    Ok(())
}

fn parse_metric_columns(csv: &str) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let cd_i = header.iter().position(|h| *h == "cd_m")?;
    let emd_i = header.iter().position(|h| *h == "emd_m")?;
    let mut cd = Vec::new();
    let mut emd = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        cd.push(cells.get(cd_i)?.parse().ok()?);
        emd.push(cells.get(emd_i)?.parse().ok()?);
    }
    Some((cd, emd))
}

fn cmd_ablate(cfg: &RunConfig, paths: &RunPaths) -> Result<(), CliError> {
    let manifest = read_manifest(&paths.dataset_dir)?;
    check_manifest_geometry(cfg, &manifest)?;
    let frames = load_split(&paths.dataset_dir, &manifest, "test")?;
    let enc_on = load_artifacts(&paths.ae_ckpt, &paths.dm_ckpt, &cfg.dataset.fov_lidar)?;
    let enc_off = load_artifacts(&paths.ae_ckpt, &paths.dm_raw_ckpt, &cfg.dataset.fov_lidar)?;
    let arts = AblationArtifacts { enc_on, enc_off };
    let outcome = run_ablation(&arts, &frames, &AblationVariant::all(), &cfg.generate, &cfg.emd, cfg.seed)?;
    fs::create_dir_all(&paths.metrics_dir)?;
    let csv_path = paths.metrics_dir.join("ablation.csv");
    fs::write(&csv_path, outcome.csv())?;
    for v in AblationVariant::all() {
        if let Some((cd, emd)) = outcome.variant_mean(v.label()) {
            println!("ablate[{}]: mean CD {:.4} m, mean EMD {:.4} m", v.label(), cd, emd);
        }
    }
    println!("ablate: {} rows -> {}", outcome.rows.len(), csv_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PolarFov;
    use std::sync::OnceLock;

    fn run_args(args: &[&str]) -> Result<(), CliError> {
        let cli = Cli::try_parse_from(args).expect("argv parses");
        run(cli)
    }

    /// A pipeline small enough to train inside a test, with the desk
    /// profile's shape (same angular layout, same conditioning chain).
    fn micro_config() -> RunConfig {
        let mut cfg = RunConfig::smoke_default();
        cfg.dataset.fov_lidar = PolarFov { n_r: 32, n_az: 32, n_el: 16, ..cfg.dataset.fov_lidar.clone() };
        cfg.dataset.fov_radar = cfg.dataset.fov_lidar.coarsened(1, 4, 4).unwrap();
        cfg.dataset.n_scenes = 5;
        cfg.dataset.frames_per_scene = 1;
        cfg.dataset.n_points = 96;
        cfg.train_ae.epochs = 2;
        cfg.train_ae.batch_frames = 2;
        cfg.train_ae.queries_per_frame = 64;
        cfg.train_dm.epochs = 2;
        cfg.train_dm.batch = 2;
        cfg.fine_tune.epochs = 1;
        cfg.fine_tune.batch = 2;
        cfg.ae.m_latent = 8;
        cfg.ae.d_latent = 4;
        cfg.ae.d_model = 16;
        cfg.ae.n_heads = 2;
        cfg.ae.enc_blocks = 1;
        cfg.ae.dec_blocks = 1;
        cfg.ae.fourier_bands = 2;
        cfg.dm.dit.depth = 1;
        cfg.dm.dit.width = 16;
        cfg.dm.dit.heads = 2;
        cfg.dm.dit.m_latent = 8;
        cfg.dm.dit.d_latent = 4;
        cfg.dm.dit.d_cond = 8;
        cfg.dm.renc.expect_dims = [32, 8, 4];
        cfg.dm.renc.channels = [4, 6, 8];
        cfg.dm.renc.bands = 2;
        cfg.generate.plan.n_free = 120;
        cfg.generate.plan.n_cfar = 168;
        cfg.emd.exact_max = 16;
        cfg.validate().unwrap();
        cfg
    }

    struct MicroRun {
        root: PathBuf,
        cfg_path: PathBuf,
    }

    /// Build + train once; every test that needs artifacts shares them.
    fn micro_run() -> &'static MicroRun {
        static RUN: OnceLock<MicroRun> = OnceLock::new();
        RUN.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap().keep();
            let cfg_path = dir.join("micro.json");
            let text = serde_json::to_string_pretty(&micro_config()).unwrap();
            fs::write(&cfg_path, text).unwrap();
            let root = dir.join("run");
            let cfgs = cfg_path.to_str().unwrap();
            let roots = root.to_str().unwrap();
            for step in [
                vec!["raldkit", "dataset", "build", "--config", cfgs, "--out", roots],
                vec!["raldkit", "train-ae", "--config", cfgs, "--out", roots],
                vec!["raldkit", "train-dm", "--config", cfgs, "--out", roots],
                vec![
                    "raldkit", "train-dm", "--config", cfgs, "--out", roots,
                    "--set", "dm.cond_source=\"raw_spectrum\"",
                ],
            ] {
                run_args(&step).unwrap_or_else(|e| panic!("{step:?}: {}", e.to_json()));
            }
            MicroRun { root, cfg_path }
        })
    }

    #[test]
    fn pipeline_generate_eval_report_ablate() {
        let mr = micro_run();
        let cfgs = mr.cfg_path.to_str().unwrap();
        let roots = mr.root.to_str().unwrap();

        run_args(&["raldkit", "generate", "--config", cfgs, "--out", roots]).unwrap();
        let plys: Vec<_> = fs::read_dir(mr.root.join("generated"))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "ply"))
            .collect();
        assert_eq!(plys.len(), 1, "one test frame in the micro dataset");
        assert!(mr.root.join("resolved_config.json").is_file());
        assert!(!mr.root.join(".raldkit.lock").exists(), "lock released");

        run_args(&["raldkit", "baseline-cfar", "--config", cfgs, "--out", roots]).unwrap();
        run_args(&["raldkit", "eval", "--config", cfgs, "--out", roots]).unwrap();
        run_args(&[
            "raldkit", "eval", "--config", cfgs, "--out", roots,
            "--set", "paths.pred_dir=baseline",
        ])
        .unwrap();
        for f in ["generated_metrics.csv", "generated_summary.json", "baseline_metrics.csv"] {
            assert!(mr.root.join("metrics").join(f).is_file(), "missing {f}");
        }

        run_args(&["raldkit", "report-cdf", "--config", cfgs, "--out", roots]).unwrap();
        let svg = fs::read_to_string(mr.root.join("metrics/cdf_cd.svg")).unwrap();
        assert!(svg.contains("<svg"));
        assert!(svg.contains("generated") && svg.contains("baseline"));

        run_args(&["raldkit", "ablate", "--config", cfgs, "--out", roots]).unwrap();
        let ab = fs::read_to_string(mr.root.join("metrics/ablation.csv")).unwrap();
        assert!(ab.starts_with("variant,scene,frame,cd_m,emd_m"));
        for v in ["a,", "b,", "c,"] {
            assert!(ab.lines().any(|l| l.starts_with(v)), "variant {v} missing");
        }

        run_args(&["raldkit", "fine-tune", "--config", cfgs, "--out", roots]).unwrap();
        let (meta, _, _) = load_checkpoint(&mr.root.join("ckpts/dm_tuned")).unwrap();
        assert_eq!(meta.kind, "diffusion");
    }

    #[test]
    fn generate_is_reproducible_across_run_roots() {
        let mr = micro_run();
        let cfgs = mr.cfg_path.to_str().unwrap();
        let mut outs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
        for sub in ["rerun_a", "rerun_b"] {
            let root = mr.root.join(sub);
            // Point the new root's relative paths at the shared artifacts.
            let ds = mr.root.join("dataset");
            let ae = mr.root.join("ckpts/ae");
            let dm = mr.root.join("ckpts/dm");
            run_args(&[
                "raldkit", "generate", "--config", cfgs,
                "--out", root.to_str().unwrap(),
                "--set", &format!("paths.dataset_dir={}", ds.display()),
                "--set", &format!("paths.ae_ckpt={}", ae.display()),
                "--set", &format!("paths.dm_ckpt={}", dm.display()),
            ])
            .unwrap();
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(root.join("generated"))
                .unwrap()
                .map(|e| {
                    let p = e.unwrap().path();
                    (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
                })
                .collect();
            files.sort();
            assert!(!files.is_empty());
            outs.push(files);
        }
        assert_eq!(outs[0], outs[1], "same config + seed must give identical bytes");
    }

    #[test]
    fn eval_of_ground_truth_against_itself_is_zero() {
        let mr = micro_run();
        let cfgs = mr.cfg_path.to_str().unwrap();
        let root = mr.root.join("self_eval");
        let ds = mr.root.join("dataset");
        run_args(&[
            "raldkit", "eval", "--config", cfgs,
            "--out", root.to_str().unwrap(),
            "--set", &format!("paths.dataset_dir={}", ds.display()),
            "--set", &format!("paths.pred_dir={}", ds.join("frames").display()),
            // The exact assignment solver reports true zeros on identical
            // clouds; the entropic approximation would not.
            "--set", "emd.exact_max=128",
        ])
        .unwrap();
        let text = fs::read_to_string(root.join("metrics/frames_summary.json")).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["mean_chamfer"].as_f64().unwrap(), 0.0);
        assert_eq!(v["mean_emd"].as_f64().unwrap(), 0.0);
    }

    #[test]
    fn lock_file_blocks_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join(".raldkit.lock"), "someone else\n").unwrap();
        let err = run_args(&[
            "raldkit", "dataset", "build", "--out", root.to_str().unwrap(),
        ])
        .unwrap_err();
        assert_eq!(err.code, "lock_held");
        assert!(!root.join("resolved_config.json").exists(), "no writes while locked out");
    }

    #[test]
    fn missing_checkpoint_yields_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mr = micro_run();
        let err = run_args(&[
            "raldkit", "generate",
            "--config", mr.cfg_path.to_str().unwrap(),
            "--out", root.to_str().unwrap(),
            "--set", &format!("paths.dataset_dir={}", mr.root.join("dataset").display()),
        ])
        .unwrap_err();
        assert_eq!(err.code, "checkpoint");
    }

    #[test]
    fn seed_flag_overrides_config_and_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("r");
        let mut cfg = micro_config();
        cfg.dataset.n_scenes = 2;
        cfg.dataset.split_fractions = (0.5, 0.25, 0.25);
        let p = dir.path().join("c.json");
        fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
        run_args(&[
            "raldkit", "dataset", "build",
            "--config", p.to_str().unwrap(),
            "--out", root.to_str().unwrap(),
            "--seed", "12345",
        ])
        .unwrap();
        let v: Value =
            serde_json::from_str(&fs::read_to_string(root.join("resolved_config.json")).unwrap())
                .unwrap();
        assert_eq!(v["seed"], 12345);
        let manifest = read_manifest(&root.join("dataset")).unwrap();
        assert_eq!(manifest.seed, 12345);
    }

    #[test]
    fn bad_override_and_unknown_key_are_config_errors() {
        let err = run_args(&["raldkit", "eval", "--set", "nonsense"]).unwrap_err();
        assert_eq!(err.code, "config");
        let err = run_args(&["raldkit", "eval", "--set", "train_dm.lrr=1"]).unwrap_err();
        assert_eq!(err.code, "config");
    }

    #[test]
    fn error_json_has_the_contract_shape() {
        let e = CliError::new("checkpoint", "boom").with("path", "x");
        let v: Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["code"], "checkpoint");
        assert_eq!(v["message"], "boom");
        assert_eq!(v["context"]["path"], "x");
    }

    #[test]
    fn thread_count_prefers_flag_over_env() {
        assert_eq!(thread_count(Some(3)), Some(3));
        assert_eq!(thread_count(Some(0)), None);
        // Env fallback is exercised implicitly; avoid mutating process env
        // in a threaded test binary.
    }
}
