//! End-to-end generation: spectrum in, metric point cloud out.
//!
//! The chain is: condition tokens from the spectrum → latent sample from the
//! diffusion model → de-standardize → occupancy decode at a set of query
//! points → threshold → points. Query placement is radar-guided: a
//! low-threshold CFAR pass marks plausible object cells and a share of the
//! queries is spent inside those frustums (the radar gives a strong prior on
//! where surfaces are), with the rest spread uniformly over the field of
//! view so free space keeps getting probed. Each detected radar cell is
//! coarser than the output grid, so CFAR queries are spread over the cell's
//! whole footprint rather than pinned to its center.
//!
//! Checkpoint compatibility is enforced: the diffusion checkpoint records the
//! digest of the autoencoder it was trained against, and [`load_artifacts`]
//! refuses a decoder with a different digest.
//!
//! [`run_ablation`] drives the conditioning/initialization study: variant (a)
//! conditions on the raw embedded spectrum with CFAR-guided queries, (b) uses
//! the learned radar encoder with pure-random queries, and (c) is the full
//! system.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoenc::{decode_occupancy, AeConfig, AeError};
use crate::diffusion::{
    condition_tokens, ddpm_sample, edm_heun_sample, read_dm_config, CondSource, DiffusionError,
    DmConfig, LatentStats, NoiseSchedule,
};
use crate::geom::ply::{write_ply, PlyError};
use crate::geom::{frustum_index, polar_to_cart, GeomError, NormalizeMap, PointCloud, PolarFov};
use crate::metrics::{evaluate_pair, EmdConfig, MetricsError};
use crate::nn::ckpt::{load_checkpoint, CkptError};
use crate::nn::ParamStore;
use crate::radar::{calibrate_alpha, os_cfar, CfarConfig, Detection, RadarError, SpectrumCube};
use crate::scene::FrameData;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("query plan has no points in either category")]
    EmptyPlan,
    #[error("checkpoint at {path} has kind {got:?}, expected {want:?}")]
    WrongKind { path: PathBuf, got: String, want: &'static str },
    #[error("diffusion checkpoint was trained against autoencoder {want}, but the loaded autoencoder digest is {got}")]
    CheckpointMismatch { want: String, got: String },
    #[error("diffusion checkpoint records no parent autoencoder digest")]
    MissingParent,
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Autoenc(#[from] AeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Radar(#[from] RadarError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Query initialization
// ---------------------------------------------------------------------------

/// How decoder queries are allocated between free space and CFAR-detected
/// frustums. The desk default keeps the 5:7 free-to-detected split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryInitPlan {
    pub n_free: usize,
    pub n_cfar: usize,
    /// Per-axis spread of CFAR queries as a fraction of the detected cell's
    /// half-width in (range, azimuth, elevation). 1.0 fills the footprint.
    pub jitter: [f64; 3],
}

impl QueryInitPlan {
    pub fn desk_default() -> Self {
        Self { n_free: 20_000, n_cfar: 28_000, jitter: [1.0; 3] }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_free + self.n_cfar == 0 {
            return Err(PipelineError::EmptyPlan);
        }
        Ok(())
    }

    /// Same total budget, all uniform — the query-initialization ablation.
    pub fn random_equivalent(&self) -> Self {
        Self { n_free: self.n_free + self.n_cfar, n_cfar: 0, jitter: self.jitter }
    }
}

/// A permissive detector for query placement: high design false-alarm rate,
/// so weak returns still attract queries.
pub fn low_threshold_cfar() -> CfarConfig {
    let window = [4, 2, 1];
    let guard = [1, 1, 0];
    let cfg = CfarConfig { window, guard, k: 94, alpha: 1.0 };
    let n = cfg.full_reference_count();
    let alpha = calibrate_alpha(0.05, n, cfg.k).expect("fixed geometry calibrates");
    CfarConfig { alpha, ..cfg }
}

/// Detector tuned for the stand-alone CFAR point cloud baseline
/// (design P_fa = 1e-3).
pub fn baseline_cfar() -> CfarConfig {
    let cfg = CfarConfig { window: [4, 2, 1], guard: [1, 1, 0], k: 94, alpha: 1.0 };
    let n = cfg.full_reference_count();
    let alpha = calibrate_alpha(1e-3, n, cfg.k).expect("fixed geometry calibrates");
    CfarConfig { alpha, ..cfg }
}

/// Query points for one generation call.
#[derive(Debug, Clone)]
pub struct QueryInit {
    /// Metric-space query points; the first `n_from_cfar` sit inside
    /// detected radar cells.
    pub points: Vec<[f64; 3]>,
    pub n_from_cfar: usize,
    pub n_detections: usize,
    /// True when no cell detected and the CFAR budget was reallocated to
    /// uniform sampling.
    pub fallback: bool,
}

fn uniform_in_fov(fov: &PolarFov, rng: &mut ChaCha12Rng) -> [f64; 3] {
    let r = rng.gen_range(fov.r_min..fov.r_max);
    let az = rng.gen_range(fov.az_min..fov.az_max);
    let el = rng.gen_range(fov.el_min..fov.el_max);
    polar_to_cart(r, az, el)
}

/// Place decoder queries: `n_cfar` uniformly inside detected radar frustums
/// (spread per `plan.jitter`), `n_free` uniformly over the field of view.
/// Zero detections reallocate the whole budget to uniform sampling instead
/// of failing, so low-SNR frames still produce output.
pub fn init_queries(
    cube: &SpectrumCube,
    plan: &QueryInitPlan,
    low_cfar: &CfarConfig,
    rng: &mut ChaCha12Rng,
) -> Result<QueryInit, PipelineError> {
    plan.validate()?;
    let detections: Vec<Detection> = if plan.n_cfar > 0 {
        os_cfar(cube, low_cfar)?
    } else {
        Vec::new()
    };
    let fov = &cube.fov;
    let dr = (fov.r_max - fov.r_min) / fov.n_r as f64;
    let daz = (fov.az_max - fov.az_min) / fov.n_az as f64;
    let del = (fov.el_max - fov.el_min) / fov.n_el as f64;

    let fallback = plan.n_cfar > 0 && detections.is_empty();
    let (n_cfar, n_free) = if fallback {
        (0, plan.n_free + plan.n_cfar)
    } else {
        (plan.n_cfar, plan.n_free)
    };

    let mut points = Vec::with_capacity(n_cfar + n_free);
    for _ in 0..n_cfar {
        let det = &detections[rng.gen_range(0..detections.len())];
        let (rc, azc, elc) = fov.cell_center(det.idx);
        let hw = [0.5 * dr * plan.jitter[0], 0.5 * daz * plan.jitter[1], 0.5 * del * plan.jitter[2]];
        let r = rng.gen_range(rc - hw[0]..rc + hw[0]);
        let az = rng.gen_range(azc - hw[1]..azc + hw[1]);
        let el = rng.gen_range(elc - hw[2]..elc + hw[2]);
        points.push(polar_to_cart(r, az, el));
    }
    for _ in 0..n_free {
        points.push(uniform_in_fov(fov, rng));
    }
    Ok(QueryInit { points, n_from_cfar: n_cfar, n_detections: detections.len(), fallback })
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Everything generation needs, loaded once: the frozen autoencoder, the
/// diffusion model trained against it, latent stats, and the coordinate map.
#[derive(Debug, Clone)]
pub struct GenArtifacts {
    pub ae_store: ParamStore<f32>,
    pub ae_cfg: AeConfig,
    pub ae_digest: String,
    pub stats: LatentStats,
    pub dm_store: ParamStore<f32>,
    pub dm_cfg: DmConfig,
    pub dm_digest: String,
    pub norm: NormalizeMap,
    pub fov_lidar: PolarFov,
}

/// Load both checkpoints and verify the chain: the diffusion checkpoint must
/// name the autoencoder's digest as its parent.
pub fn load_artifacts(
    ae_base: &Path,
    dm_base: &Path,
    fov_lidar: &PolarFov,
) -> Result<GenArtifacts, PipelineError> {
    let (ae_meta, ae_store, ae_digest) = load_checkpoint(ae_base)?;
    if ae_meta.kind != "autoencoder" {
        return Err(PipelineError::WrongKind {
            path: ae_base.to_path_buf(),
            got: ae_meta.kind,
            want: "autoencoder",
        });
    }
    let ae_cfg: AeConfig = serde_json::from_value(ae_meta.config["ae"].clone())?;
    let stats = LatentStats::from_ae_config(&ae_meta.config)?;

    let (dm_meta, dm_store, dm_digest) = load_checkpoint(dm_base)?;
    if dm_meta.kind != "diffusion" {
        return Err(PipelineError::WrongKind {
            path: dm_base.to_path_buf(),
            got: dm_meta.kind,
            want: "diffusion",
        });
    }
    let want = dm_meta.parent_digest.clone().ok_or(PipelineError::MissingParent)?;
    if want != ae_digest {
        return Err(PipelineError::CheckpointMismatch { want, got: ae_digest });
    }
    let dm_cfg = read_dm_config(&dm_meta)?;

    Ok(GenArtifacts {
        ae_store,
        ae_cfg,
        ae_digest,
        stats,
        dm_store,
        dm_cfg,
        dm_digest,
        norm: NormalizeMap::from_fov(fov_lidar)?,
        fov_lidar: fov_lidar.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenOptions {
    pub plan: QueryInitPlan,
    pub low_cfar: CfarConfig,
    /// Occupancy probability above which a query becomes an output point.
    pub threshold: f64,
}

impl GenOptions {
    pub fn desk_default() -> Self {
        Self { plan: QueryInitPlan::desk_default(), low_cfar: low_threshold_cfar(), threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GenTimings {
    pub condition_s: f64,
    pub sample_s: f64,
    pub decode_s: f64,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub cloud: PointCloud,
    /// All query locations, metric space; first `n_from_cfar` are CFAR-guided.
    pub queries: Vec<[f64; 3]>,
    /// Decoder probability per query, aligned with `queries`.
    pub probs: Vec<f32>,
    pub n_from_cfar: usize,
    pub fallback: bool,
    pub timings: GenTimings,
}

const STREAM_GEN_INIT: u64 = 1 << 44;
const STREAM_GEN_SAMPLE: u64 = 1 << 45;

/// Generate one cloud from one spectrum. Pure in (artifacts, cube, options,
/// seed): the same inputs give the same cloud. Empty output is legal.
pub fn generate(
    art: &GenArtifacts,
    cube: &SpectrumCube,
    opts: &GenOptions,
    seed: u64,
) -> Result<GenerationResult, PipelineError> {
    let mut init_rng = ChaCha12Rng::seed_from_u64(seed);
    init_rng.set_stream(STREAM_GEN_INIT);
    let init = init_queries(cube, &opts.plan, &opts.low_cfar, &mut init_rng)?;

    let t0 = Instant::now();
    let cond = condition_tokens(&art.dm_store, &art.dm_cfg, Some(cube))?;
    let condition_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut sample_rng = ChaCha12Rng::seed_from_u64(seed);
    sample_rng.set_stream(STREAM_GEN_SAMPLE);
    let z_std = match &art.dm_cfg.schedule {
        NoiseSchedule::Edm(_) => {
            edm_heun_sample(&art.dm_store, &art.dm_cfg, cond.as_ref(), &mut sample_rng)?
        }
        NoiseSchedule::Ddpm(_) => {
            ddpm_sample(&art.dm_store, &art.dm_cfg, cond.as_ref(), &mut sample_rng)?
        }
    };
    let z = art.stats.destandardize(&z_std);
    let sample_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let queries_norm: Vec<[f64; 3]> =
        init.points.iter().map(|&p| art.norm.forward(p)).collect();
    let probs = decode_occupancy(&art.ae_store, &art.ae_cfg, &z, &queries_norm);
    let cloud = PointCloud::new(
        init.points
            .iter()
            .zip(&probs)
            .filter(|(_, &p)| (p as f64) > opts.threshold)
            .map(|(&q, _)| q)
            .collect(),
    );
    let decode_s = t2.elapsed().as_secs_f64();

    Ok(GenerationResult {
        cloud,
        queries: init.points,
        probs,
        n_from_cfar: init.n_from_cfar,
        fallback: init.fallback,
        timings: GenTimings { condition_s, sample_s, decode_s },
    })
}

/// Everything needed to reproduce a generated cloud, written next to it.
/// Wall-clock timings are deliberately left out so re-runs are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub ae_digest: String,
    pub dm_digest: String,
    pub seed: u64,
    pub options: GenOptions,
    pub n_points: usize,
    pub n_queries: usize,
    pub n_from_cfar: usize,
    pub fallback: bool,
}

/// Write `<stem>.ply` plus `<stem>.json` provenance into `dir`.
pub fn write_generation(
    dir: &Path,
    stem: &str,
    art: &GenArtifacts,
    opts: &GenOptions,
    seed: u64,
    res: &GenerationResult,
) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(dir)?;
    let ply_path = dir.join(format!("{stem}.ply"));
    write_ply(&ply_path, &res.cloud)?;
    let prov = Provenance {
        ae_digest: art.ae_digest.clone(),
        dm_digest: art.dm_digest.clone(),
        seed,
        options: opts.clone(),
        n_points: res.cloud.points.len(),
        n_queries: res.queries.len(),
        n_from_cfar: res.n_from_cfar,
        fallback: res.fallback,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&prov)?)?;
    Ok(ply_path)
}

/// Frame stem shared by dataset files and generated outputs.
pub fn frame_stem(scene: usize, frame: usize) -> String {
    format!("scene{scene:04}_f{frame:02}")
}

/// Generate a cloud for every frame, in parallel, one RNG stream per frame
/// (derived from the global seed and the frame's identity), and write
/// PLY + provenance into `out_dir`.
pub fn generate_split(
    art: &GenArtifacts,
    frames: &[FrameData],
    opts: &GenOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<(String, GenerationResult)>, PipelineError> {
    fs::create_dir_all(out_dir)?;
    let results: Result<Vec<(String, GenerationResult)>, PipelineError> = frames
        .par_iter()
        .map(|f| {
            let frame_seed =
                seed ^ (f.entry.scene as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ (f.entry.frame as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            let res = generate(art, &f.spectrum, opts, frame_seed)?;
            Ok((frame_stem(f.entry.scene, f.entry.frame), res))
        })
        .collect();
    let results = results?;
    for (stem, res) in &results {
        write_generation(out_dir, stem, art, opts, seed, res)?;
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// The conditioning/initialization study arms. Letters follow the ablation
/// table: (a) raw embedded spectrum + CFAR-guided queries, (b) learned radar
/// encoder + pure-random queries, (c) the full system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    RawSpectrumCond,
    RandomInit,
    Full,
}

impl AblationVariant {
    pub fn all() -> [AblationVariant; 3] {
        [AblationVariant::RawSpectrumCond, AblationVariant::RandomInit, AblationVariant::Full]
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::RawSpectrumCond => "a",
            AblationVariant::RandomInit => "b",
            AblationVariant::Full => "c",
        }
    }

    pub fn uses_radar_encoder(&self) -> bool {
        !matches!(self, AblationVariant::RawSpectrumCond)
    }

    pub fn uses_cfar_init(&self) -> bool {
        !matches!(self, AblationVariant::RandomInit)
    }
}

/// Trained models for both conditioning arms: `enc_on` conditions through
/// the learned radar encoder, `enc_off` on the raw embedded spectrum.
#[derive(Debug, Clone)]
pub struct AblationArtifacts {
    pub enc_on: GenArtifacts,
    pub enc_off: GenArtifacts,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub scene: usize,
    pub frame: usize,
    pub cd_m: f64,
    pub emd_m: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,scene,frame,cd_m,emd_m\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.variant, r.scene, r.frame, r.cd_m, r.emd_m));
        }
        s
    }

    /// Mean (CD, EMD) for one variant.
    pub fn variant_mean(&self, label: &str) -> Option<(f64, f64)> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == label).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.cd_m).sum::<f64>() / n,
            rows.iter().map(|r| r.emd_m).sum::<f64>() / n,
        ))
    }
}

/// Generate and score every requested variant on the given frames. Rows are
/// ordered (variant, scene, frame) so repeated runs emit identical CSV.
pub fn run_ablation(
    arts: &AblationArtifacts,
    frames: &[FrameData],
    variants: &[AblationVariant],
    opts: &GenOptions,
    emd_cfg: &EmdConfig,
    seed: u64,
) -> Result<AblationOutcome, PipelineError> {
    let mut rows = Vec::with_capacity(variants.len() * frames.len());
    for v in variants {
        let art = if v.uses_radar_encoder() { &arts.enc_on } else { &arts.enc_off };
        debug_assert_eq!(
            art.dm_cfg.cond_source,
            if v.uses_radar_encoder() { CondSource::RadarEncoder } else { CondSource::RawSpectrum },
        );
        let v_opts = GenOptions {
            plan: if v.uses_cfar_init() { opts.plan.clone() } else { opts.plan.random_equivalent() },
            ..opts.clone()
        };
        let scored: Result<Vec<AblationRow>, PipelineError> = frames
            .par_iter()
            .map(|f| {
                let frame_seed = seed
                    ^ (f.entry.scene as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ (f.entry.frame as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                let res = generate(art, &f.spectrum, &v_opts, frame_seed)?;
                let m = evaluate_pair(&res.cloud, &f.lidar, emd_cfg, frame_seed)?;
                Ok(AblationRow {
                    variant: v.label(),
                    scene: f.entry.scene,
                    frame: f.entry.frame,
                    cd_m: m.chamfer,
                    emd_m: m.emd,
                })
            })
            .collect();
        let mut scored = scored?;
        scored.sort_by_key(|r| (r.scene, r.frame));
        rows.extend(scored);
    }
    Ok(AblationOutcome { rows })
}

/// Fraction of ground-truth occupied cells that contain at least one query.
pub fn query_recall(fov: &PolarFov, grid: &crate::geom::FrustumGrid, queries: &[[f64; 3]]) -> f64 {
    let occupied = grid.occupied_cells();
    if occupied.is_empty() {
        return 1.0;
    }
    let mut hit = std::collections::BTreeSet::new();
    for &q in queries {
        if let Some(idx) = frustum_index(fov, q) {
            if grid.get(idx) {
                hit.insert((idx.i, idx.j, idx.k));
            }
        }
    }
    hit.len() as f64 / occupied.len() as f64
}
