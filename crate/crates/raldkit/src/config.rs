//! One JSON document that drives every command.
//!
//! A [`RunConfig`] bundles the settings for the whole pipeline — dataset
//! synthesis, both training stages, generation, the detector baseline, and
//! evaluation — so a run is reproducible from a single file plus a seed.
//! Relative paths inside [`RunPaths`] are resolved against the run root
//! (the `--out` directory), which keeps configs portable across machines.
//!
//! Command-line overrides use dotted paths into the JSON document
//! (`train_dm.lr=0.005`, `dataset.split_fractions=[0.5,0.25,0.25]`). The
//! override is applied to the raw document and the result is re-parsed, so
//! a typo in a key fails loudly instead of being silently ignored.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::autoenc::{AeConfig, TrainAeConfig};
use crate::diffusion::{CondSource, DmConfig, TrainDmConfig};
use crate::metrics::EmdConfig;
use crate::pipeline::{baseline_cfar, GenOptions};
use crate::radar::CfarConfig;
use crate::scene::DatasetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("override {arg:?} is not of the form key.path=value")]
    BadOverride { arg: String },
    #[error("override path {key:?} does not lead into the config ({reason})")]
    OverridePath { key: String, reason: String },
    #[error("config invalid: {0}")]
    Invalid(String),
}

/// Where a run reads and writes its artifacts.
///
/// Every path may be relative; [`RunPaths::resolved`] anchors relative
/// entries at the run root. Checkpoint entries are base paths — the
/// checkpoint writer appends its own extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    /// Dataset directory (manifest plus a frames/ subdirectory).
    pub dataset_dir: PathBuf,
    /// Autoencoder checkpoint base.
    pub ae_ckpt: PathBuf,
    /// Diffusion checkpoint base (spectrum-encoder conditioning).
    pub dm_ckpt: PathBuf,
    /// Diffusion checkpoint base for the raw-spectrum conditioning arm.
    pub dm_raw_ckpt: PathBuf,
    /// Output base for `fine-tune`.
    pub tuned_ckpt: PathBuf,
    /// Generated point clouds (also the default input of `eval`).
    pub pred_dir: PathBuf,
    /// Detector-baseline point clouds.
    pub baseline_dir: PathBuf,
    /// Metric CSVs, summaries, and CDF reports.
    pub metrics_dir: PathBuf,
}

impl RunPaths {
    pub fn default_layout() -> Self {
        Self {
            dataset_dir: "dataset".into(),
            ae_ckpt: "ckpts/ae".into(),
            dm_ckpt: "ckpts/dm".into(),
            dm_raw_ckpt: "ckpts/dm_raw".into(),
            tuned_ckpt: "ckpts/dm_tuned".into(),
            pred_dir: "generated".into(),
            baseline_dir: "baseline".into(),
            metrics_dir: "metrics".into(),
        }
    }

    /// Anchor every relative path at `root`; absolute paths pass through.
    pub fn resolved(&self, root: &Path) -> Self {
        let fix = |p: &PathBuf| if p.is_absolute() { p.clone() } else { root.join(p) };
        Self {
            dataset_dir: fix(&self.dataset_dir),
            ae_ckpt: fix(&self.ae_ckpt),
            dm_ckpt: fix(&self.dm_ckpt),
            dm_raw_ckpt: fix(&self.dm_raw_ckpt),
            tuned_ckpt: fix(&self.tuned_ckpt),
            pred_dir: fix(&self.pred_dir),
            baseline_dir: fix(&self.baseline_dir),
            metrics_dir: fix(&self.metrics_dir),
        }
    }
}

/// One series in the error-CDF report: a label and a metrics CSV
/// produced by `eval` (relative paths anchor at the run root).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSeries {
    pub label: String,
    pub csv: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; per-stage seeds derive from it unless overridden.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub ae: AeConfig,
    pub train_ae: TrainAeConfig,
    pub dm: DmConfig,
    pub train_dm: TrainDmConfig,
    pub fine_tune: TrainDmConfig,
    pub generate: GenOptions,
    /// Detector settings for the stand-alone baseline point clouds.
    pub baseline: CfarConfig,
    pub emd: EmdConfig,
    pub paths: RunPaths,
    /// Series plotted by `report-cdf`.
    pub report: Vec<ReportSeries>,
}

impl RunConfig {
    /// Full-size desk profile.
    pub fn desk_default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetConfig::desk_default(),
            ae: AeConfig::desk_default(),
            train_ae: TrainAeConfig::desk_default(),
            dm: DmConfig::desk_default(),
            train_dm: TrainDmConfig::desk_default(),
            fine_tune: TrainDmConfig::fine_tune_default(),
            generate: GenOptions::desk_default(),
            baseline: baseline_cfar(),
            emd: EmdConfig::default(),
            paths: RunPaths::default_layout(),
            report: vec![
                ReportSeries { label: "generated".into(), csv: "metrics/generated_metrics.csv".into() },
                ReportSeries { label: "baseline".into(), csv: "metrics/baseline_metrics.csv".into() },
            ],
        }
    }

    /// Scaled-down profile for end-to-end smoke runs: the desk geometry
    /// with fewer scenes, fewer points, five epochs per stage, and a
    /// proportionally smaller query budget. Short runs need more optimizer
    /// steps per epoch (single-frame batches), a richer occupied fraction
    /// in the query batches, and a hotter learning rate than the full
    /// schedule; with the defaults a 5-epoch model never leaves the
    /// all-empty prediction.
    pub fn smoke_default() -> Self {
        let mut cfg = Self::desk_default();
        cfg.dataset.n_scenes = 10;
        cfg.dataset.frames_per_scene = 2;
        cfg.dataset.n_points = 512;
        cfg.dataset.split_fractions = (0.6, 0.2, 0.2);
        cfg.train_ae.epochs = 5;
        cfg.train_ae.batch_frames = 1;
        cfg.train_ae.pos_fraction = 0.25;
        cfg.train_ae.lr = 2e-3;
        cfg.train_dm.epochs = 5;
        cfg.train_dm.batch = 1;
        cfg.train_dm.lr = 2e-3;
        cfg.fine_tune.epochs = 2;
        cfg.generate.plan.n_free = 2_500;
        cfg.generate.plan.n_cfar = 3_500;
        cfg
    }

    /// Cross-field checks that no single component can see on its own.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generate.plan.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.baseline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.dm.dit.m_latent != self.ae.m_latent {
            return Err(ConfigError::Invalid(format!(
                "dm.dit.m_latent = {} but ae.m_latent = {}; the diffusion model \
                 must operate on the autoencoder's latent set",
                self.dm.dit.m_latent, self.ae.m_latent
            )));
        }
        if self.dm.dit.d_latent != self.ae.d_latent {
            return Err(ConfigError::Invalid(format!(
                "dm.dit.d_latent = {} but ae.d_latent = {}",
                self.dm.dit.d_latent, self.ae.d_latent
            )));
        }
        let radar_dims =
            [self.dataset.fov_radar.n_r, self.dataset.fov_radar.n_az, self.dataset.fov_radar.n_el];
        if self.dm.cond_source != CondSource::Unconditional && self.dm.renc.expect_dims != radar_dims {
            return Err(ConfigError::Invalid(format!(
                "dm.renc.expect_dims = {:?} but the dataset's radar grid is {:?}",
                self.dm.renc.expect_dims, radar_dims
            )));
        }
        if !(self.generate.threshold > 0.0 && self.generate.threshold < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "generate.threshold = {} is outside (0, 1)",
                self.generate.threshold
            )));
        }
        Ok(())
    }
}

/// Parse a config document, apply `key=value` overrides, and validate.
///
/// `path = None` starts from the desk profile. Overrides are applied in
/// order, so later `--set`s win.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, ConfigError> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
            serde_json::from_str::<Value>(&text)?
        }
        None => serde_json::to_value(RunConfig::desk_default())?,
    };
    for s in sets {
        apply_set(&mut doc, s)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `key.path=value` override to a JSON document.
///
/// The path must already lead to a spot in the document: intermediate
/// segments must exist (arrays are indexed by number), and the final
/// segment must name an existing object key or array slot. Values parse
/// as JSON when they can; anything that doesn't parse is taken as a
/// string, so `--set paths.pred_dir=other/preds` works unquoted.
pub fn apply_set(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(ConfigError::BadOverride { arg: spec.to_string() });
    };
    if key.is_empty() {
        return Err(ConfigError::BadOverride { arg: spec.to_string() });
    }
    let value = serde_json::from_str::<Value>(raw)
        .unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut node = doc;
    let segments: Vec<&str> = key.split('.').collect();
    let path_err = |reason: &dyn fmt::Display| ConfigError::OverridePath {
        key: key.to_string(),
        reason: reason.to_string(),
    };
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match node {
            Value::Object(map) => {
                let Some(next) = map.get_mut(*seg) else {
                    return Err(path_err(&format_args!("no key {seg:?} here")));
                };
                if last {
                    *next = value;
                    return Ok(());
                }
                node = next;
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| path_err(&format_args!("{seg:?} is not an array index")))?;
                let len = items.len();
                let Some(next) = items.get_mut(idx) else {
                    return Err(path_err(&format_args!("index {idx} out of bounds (len {len})")));
                };
                if last {
                    *next = value;
                    return Ok(());
                }
                node = next;
            }
            other => {
                let kind = match other {
                    Value::Null => "null",
                    Value::Bool(_) => "a boolean",
                    Value::Number(_) => "a number",
                    Value::String(_) => "a string",
                    _ => unreachable!(),
                };
                return Err(path_err(&format_args!("segment {seg:?} descends into {kind}")));
            }
        }
    }
    unreachable!("split('.') yields at least one segment");
}

/// Write the fully-resolved config next to a run's outputs, so the run
/// can be reproduced without the original command line.
pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, ConfigError> {
    fs::create_dir_all(dir)
        .map_err(|source| ConfigError::Io { path: dir.to_path_buf(), source })?;
    let path = dir.join("resolved_config.json");
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(&path, text)
        .map_err(|source| ConfigError::Io { path: path.clone(), source })?;
    Ok(path)
}
