//! Occupancy autoencoder over lidar frames.
//!
//! The encoder compresses a point cloud into a small set of latent tokens; the
//! decoder answers occupancy queries at arbitrary 3-D positions by
//! cross-attending those tokens. Three ways of forming the encoder's latent
//! queries are supported, because they differ in a property that matters
//! downstream: `hybrid` and `static` are exactly permutation-invariant in the
//! input points, while `sample` (latent queries taken from randomly subsampled
//! point embeddings) is not, so the same scene can map to different latents
//! across epochs. Occupancy targets come from either the polar frustum grid or
//! an axis-aligned voxel grid of comparable cell budget, which is the second
//! ablation axis.
//!
//! All query positions handed to the networks live in the normalized cube
//! [-1, 1]^3 (see [`NormalizeMap`]); sampling and labeling happen in metric
//! space.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    label_occupancy_voxel, polar_to_cart, query_occupancy, FrustumGrid, FrustumIndex, GeomError,
    NormalizeMap, PointCloud, PolarFov, VoxelGrid,
};
use crate::nn::ckpt::{save_checkpoint, CkptError, CkptMeta};
use crate::nn::opt::{
    accumulate_grads, bind_params, clip_global_norm, collect_grads, scale_grads, uniform_init,
    xavier_uniform, GradMap,
};
use crate::nn::{Adam, Graph, NodeId, ParamStore, Real, Tensor};
use crate::scene::FrameData;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AeError {
    #[error("cannot encode an empty point cloud")]
    EmptyCloud,
    #[error("positive queries requested but the occupancy grid has no occupied cells")]
    NoPositives,
    #[error("no training frames")]
    NoFrames,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

/// How the encoder forms its M latent queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Learned static queries plus a pooled, permutation-invariant dynamic
    /// descriptor of the cloud. Order-invariant.
    Hybrid,
    /// Learned static queries only. Order-invariant.
    Static,
    /// Queries are embeddings of M randomly subsampled input points.
    /// Deliberately order- and subsample-sensitive.
    Sample,
}

/// Occupancy parameterization used for training targets and reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    Frustum,
    Voxel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub query_mode: QueryMode,
    pub grid_mode: GridMode,
    /// Number of latent tokens M.
    pub m_latent: usize,
    /// Channels per latent token.
    pub d_latent: usize,
    /// Transformer width.
    pub d_model: usize,
    pub n_heads: usize,
    /// Self-attention blocks after the point cross-attention.
    pub enc_blocks: usize,
    /// Decoder cross-attention blocks.
    pub dec_blocks: usize,
    /// Octave count for the sinusoidal position features.
    pub fourier_bands: usize,
    /// Voxel edge lengths in meters (voxel grid mode only).
    pub voxel_size: [f64; 3],
}

impl AeConfig {
    pub fn desk_default() -> Self {
        Self {
            query_mode: QueryMode::Hybrid,
            grid_mode: GridMode::Frustum,
            m_latent: 64,
            d_latent: 16,
            d_model: 64,
            n_heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            fourier_bands: 4,
            // Isotropic voxels sized so the voxel grid over the desk FOV's
            // bounding box has roughly the same cell count as the 160x32x16
            // frustum grid, keeping the two parameterizations comparable.
            voxel_size: [0.18, 0.18, 0.18],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.m_latent == 0 || self.d_latent == 0 || self.d_model == 0 {
            return Err("latent token count, latent width, and model width must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!(
                "model width {} must be divisible by head count {}",
                self.d_model, self.n_heads
            ));
        }
        if self.fourier_bands == 0 {
            return Err("at least one fourier band is required".into());
        }
        if self.grid_mode == GridMode::Voxel && self.voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err("voxel sizes must be positive".into());
        }
        Ok(())
    }

    fn feat_dim(&self) -> usize {
        3 + 6 * self.fourier_bands
    }
}

/// Occupancy target in either parameterization, presenting one query/sample
/// surface to the training loop and the reconstruction path.
#[derive(Debug, Clone)]
pub enum OccGrid {
    Frustum(FrustumGrid),
    Voxel(VoxelGrid),
}

impl OccGrid {
    /// Label a cloud according to the configured grid mode.
    pub fn from_cloud(cfg: &AeConfig, fov: &PolarFov, pc: &PointCloud) -> Result<Self, AeError> {
        match cfg.grid_mode {
            GridMode::Frustum => Ok(OccGrid::Frustum(crate::geom::label_occupancy(fov, pc))),
            GridMode::Voxel => {
                let (lo, hi) = fov.cartesian_bbox();
                Ok(OccGrid::Voxel(label_occupancy_voxel(cfg.voxel_size, lo, hi, pc)?))
            }
        }
    }

    pub fn query(&self, p: [f64; 3]) -> bool {
        match self {
            OccGrid::Frustum(g) => query_occupancy(g, p),
            OccGrid::Voxel(g) => g.query(p),
        }
    }

    pub fn count_occupied(&self) -> usize {
        match self {
            OccGrid::Frustum(g) => g.count_occupied(),
            OccGrid::Voxel(g) => g.count_occupied(),
        }
    }

    /// Cartesian centers of all occupied cells — the reconstruction output.
    pub fn occupied_centers(&self) -> Vec<[f64; 3]> {
        match self {
            OccGrid::Frustum(g) => g
                .occupied_cells()
                .into_iter()
                .map(|c| {
                    let (r, az, el) = g.fov().cell_center(c);
                    polar_to_cart(r, az, el)
                })
                .collect(),
            OccGrid::Voxel(g) => g
                .occupied_voxels()
                .into_iter()
                .map(|idx| {
                    let lo = g.voxel_lo(idx);
                    [
                        lo[0] + 0.5 * g.voxel[0],
                        lo[1] + 0.5 * g.voxel[1],
                        lo[2] + 0.5 * g.voxel[2],
                    ]
                })
                .collect(),
        }
    }
}

/// Occupancy queries for one training step. Positions are normalized to
/// [-1, 1]^3; labels were produced by the grid oracle in metric space.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub queries: Vec<[f64; 3]>,
    pub labels: Vec<f32>,
    /// Realized positive fraction (may exceed the requested one when negative
    /// draws land in occupied cells).
    pub pos_fraction: f64,
}

/// Draw `n` occupancy queries: `ceil(pos_frac * n)` from uniformly chosen
/// occupied cells (uniform within the cell's parameter box), the rest uniform
/// over the grid's domain. Every label is the grid oracle's answer for the
/// drawn point, so a "negative" draw that happens to land in an occupied cell
/// is labeled 1.
pub fn sample_queries(
    grid: &OccGrid,
    norm: &NormalizeMap,
    n: usize,
    pos_frac: f64,
    rng: &mut ChaCha12Rng,
) -> Result<QueryBatch, AeError> {
    let n_pos = ((pos_frac * n as f64).ceil() as usize).min(n);
    if n_pos > 0 && grid.count_occupied() == 0 {
        return Err(AeError::NoPositives);
    }
    let mut metric = Vec::with_capacity(n);
    match grid {
        OccGrid::Frustum(g) => {
            let fov = g.fov().clone();
            let cells = g.occupied_cells();
            for _ in 0..n_pos {
                let c = cells[rng.gen_range(0..cells.len())];
                let (r0, az0, el0) = fov.cell_lo(c);
                let p = polar_to_cart(
                    rng.gen_range(r0..r0 + fov.dr()),
                    rng.gen_range(az0..az0 + fov.daz()),
                    rng.gen_range(el0..el0 + fov.del()),
                );
                // Guard against the point rounding into a neighboring cell:
                // fall back to the (always interior) cell center.
                metric.push(if grid.query(p) {
                    p
                } else {
                    let (r, az, el) = fov.cell_center(c);
                    polar_to_cart(r, az, el)
                });
            }
            for _ in n_pos..n {
                metric.push(polar_to_cart(
                    rng.gen_range(fov.r_min..fov.r_max),
                    rng.gen_range(fov.az_min..fov.az_max),
                    rng.gen_range(fov.el_min..fov.el_max),
                ));
            }
        }
        OccGrid::Voxel(g) => {
            let voxels = g.occupied_voxels();
            for _ in 0..n_pos {
                let idx = voxels[rng.gen_range(0..voxels.len())];
                let lo = g.voxel_lo(idx);
                let p = [
                    rng.gen_range(lo[0]..lo[0] + g.voxel[0]),
                    rng.gen_range(lo[1]..lo[1] + g.voxel[1]),
                    rng.gen_range(lo[2]..lo[2] + g.voxel[2]),
                ];
                metric.push(if grid.query(p) {
                    p
                } else {
                    [
                        lo[0] + 0.5 * g.voxel[0],
                        lo[1] + 0.5 * g.voxel[1],
                        lo[2] + 0.5 * g.voxel[2],
                    ]
                });
            }
            for _ in n_pos..n {
                metric.push([
                    rng.gen_range(g.lo[0]..g.hi[0]),
                    rng.gen_range(g.lo[1]..g.hi[1]),
                    rng.gen_range(g.lo[2]..g.hi[2]),
                ]);
            }
        }
    }
    let labels: Vec<f32> = metric.iter().map(|&p| grid.query(p) as u32 as f32).collect();
    let pos = labels.iter().filter(|&&l| l > 0.5).count();
    let queries = metric.iter().map(|&p| norm.forward(p)).collect();
    Ok(QueryBatch {
        queries,
        labels,
        pos_fraction: pos as f64 / n.max(1) as f64,
    })
}

/// Indices of the M points used as latent queries in sample mode: without
/// replacement when the cloud is large enough, with replacement otherwise.
pub fn sample_latent_indices(n_points: usize, m: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    assert!(n_points > 0, "cannot subsample an empty cloud");
    if n_points >= m {
        let mut idx: Vec<usize> = (0..n_points).collect();
        for i in 0..m {
            let j = rng.gen_range(i..n_points);
            idx.swap(i, j);
        }
        idx.truncate(m);
        idx
    } else {
        (0..m).map(|_| rng.gen_range(0..n_points)).collect()
    }
}

/// Position features for normalized coordinates: the raw coordinates followed
/// by sin/cos at octave frequencies pi * 2^k per axis.
pub fn position_features<T: Real>(pts: &[[f64; 3]], bands: usize) -> Tensor<T> {
    let f = 3 + 6 * bands;
    let mut data = Vec::with_capacity(pts.len() * f);
    for p in pts {
        for a in 0..3 {
            data.push(T::cast(p[a]));
        }
        for k in 0..bands {
            let w = std::f64::consts::PI * (1u64 << k) as f64;
            for a in 0..3 {
                data.push(T::cast((w * p[a]).sin()));
                data.push(T::cast((w * p[a]).cos()));
            }
        }
    }
    Tensor::new(vec![pts.len(), f], data)
}

pub fn init_ae_params(cfg: &AeConfig, rng: &mut ChaCha12Rng) -> ParamStore<f32> {
    let d = cfg.d_model;
    let m = cfg.m_latent;
    let mut s = ParamStore::new();
    let q_limit = 1.0 / (d as f64).sqrt();

    let linear = |s: &mut ParamStore<f32>, rng: &mut ChaCha12Rng, pfx: &str, di: usize, do_: usize| {
        s.insert(&format!("{pfx}.w"), xavier_uniform(rng, di, do_));
        s.insert(&format!("{pfx}.b"), Tensor::zeros(vec![1, do_]));
    };
    let ln = |s: &mut ParamStore<f32>, pfx: &str, dim: usize| {
        s.insert(&format!("{pfx}.g"), Tensor::new(vec![1, dim], vec![1.0; dim]));
        s.insert(&format!("{pfx}.b"), Tensor::zeros(vec![1, dim]));
    };
    let block = |s: &mut ParamStore<f32>, rng: &mut ChaCha12Rng, pfx: &str| {
        ln(s, &format!("{pfx}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            s.insert(&format!("{pfx}.{proj}.w"), xavier_uniform(rng, d, d));
            s.insert(&format!("{pfx}.{proj}.b"), Tensor::zeros(vec![1, d]));
        }
        ln(s, &format!("{pfx}.ln2"), d);
        s.insert(&format!("{pfx}.mlp.w1"), xavier_uniform(rng, d, 2 * d));
        s.insert(&format!("{pfx}.mlp.b1"), Tensor::zeros(vec![1, 2 * d]));
        s.insert(&format!("{pfx}.mlp.w2"), xavier_uniform(rng, 2 * d, d));
        s.insert(&format!("{pfx}.mlp.b2"), Tensor::zeros(vec![1, d]));
    };

    linear(&mut s, rng, "embed.lift", cfg.feat_dim(), d);
    ln(&mut s, "embed.ln", d);

    s.insert("enc.qs", uniform_init(rng, vec![m, d], q_limit));
    // Hybrid-mode parameters are always created so a single weight store can
    // be evaluated under either invariant query mode.
    s.insert("enc.qrow", uniform_init(rng, vec![m, d], q_limit));
    linear(&mut s, rng, "enc.qd", 2 * d, d);
    for proj in ["q", "k", "v", "o"] {
        linear(&mut s, rng, &format!("enc.init.{proj}"), d, d);
    }
    linear(&mut s, rng, "enc.proj", d, d);
    for i in 0..cfg.enc_blocks {
        block(&mut s, rng, &format!("enc.blk{i}"));
    }
    linear(&mut s, rng, "enc.out", d, cfg.d_latent);

    linear(&mut s, rng, "dec.in", cfg.d_latent, d);
    for i in 0..cfg.dec_blocks {
        block(&mut s, rng, &format!("dec.blk{i}"));
    }
    // Zero head: the decoder starts exactly at probability 0.5 everywhere,
    // i.e. an initial query loss of ln 2.
    s.insert("dec.head.w", Tensor::zeros(vec![d, 1]));
    s.insert("dec.head.b", Tensor::zeros(vec![1, 1]));
    s
}

fn lin<T: Real>(g: &mut Graph<T>, ids: &BTreeMap<String, NodeId>, pfx: &str, x: NodeId) -> NodeId {
    g.linear(x, ids[&format!("{pfx}.w") as &str], ids[&format!("{pfx}.b") as &str])
}

fn norm_of<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    pfx: &str,
    x: NodeId,
) -> NodeId {
    g.layer_norm(x, ids[&format!("{pfx}.g") as &str], ids[&format!("{pfx}.b") as &str], LN_EPS)
}

/// Pre-norm residual block: attention over `kv` (self-attention when `kv` is
/// None) followed by a two-layer MLP.
fn residual_block<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    pfx: &str,
    x: NodeId,
    kv: Option<NodeId>,
    n_heads: usize,
) -> NodeId {
    let h = norm_of(g, ids, &format!("{pfx}.ln1"), x);
    let src = kv.unwrap_or(h);
    let q = lin(g, ids, &format!("{pfx}.q"), h);
    let k = lin(g, ids, &format!("{pfx}.k"), src);
    let v = lin(g, ids, &format!("{pfx}.v"), src);
    let a = g.attention(q, k, v, n_heads);
    let o = lin(g, ids, &format!("{pfx}.o"), a);
    let x = g.add(x, o);
    let h2 = norm_of(g, ids, &format!("{pfx}.ln2"), x);
    let m = g.linear(
        h2,
        ids[&format!("{pfx}.mlp.w1") as &str],
        ids[&format!("{pfx}.mlp.b1") as &str],
    );
    let m = g.gelu(m);
    let m = g.linear(
        m,
        ids[&format!("{pfx}.mlp.w2") as &str],
        ids[&format!("{pfx}.mlp.b2") as &str],
    );
    g.add(x, m)
}

fn embed_positions<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &AeConfig,
    pts: &[[f64; 3]],
) -> NodeId {
    let feats = position_features::<T>(pts, cfg.fourier_bands);
    let x = g.constant(&feats);
    let lifted = lin(g, ids, "embed.lift", x);
    norm_of(g, ids, "embed.ln", lifted)
}

pub struct EncoderBuild {
    pub p_emb: NodeId,
    /// Latent tokens, [M, d_latent].
    pub z: NodeId,
}

/// Encoder graph. The latent queries attend to the embedded points once, the
/// result (with a residual base) is projected, refined by self-attention
/// blocks, and mapped to the latent width.
pub fn build_encoder<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &AeConfig,
    pts_norm: &[[f64; 3]],
    sample_idx: Option<&[usize]>,
) -> EncoderBuild {
    assert!(!pts_norm.is_empty(), "encoder needs at least one point");
    let p_emb = embed_positions(g, ids, cfg, pts_norm);
    let (base, queries) = match cfg.query_mode {
        QueryMode::Static => (ids["enc.qs"], ids["enc.qs"]),
        QueryMode::Sample => {
            let idx = sample_idx.expect("sample query mode requires subsample indices");
            assert_eq!(idx.len(), cfg.m_latent, "need one subsample index per latent token");
            let s = g.gather_rows(p_emb, idx);
            (s, s)
        }
        QueryMode::Hybrid => {
            let mean = g.mean_rows(p_emb);
            let max = g.max_rows(p_emb);
            let pooled = g.concat_cols(mean, max);
            let qd_row = lin(g, ids, "enc.qd", pooled);
            let qd = g.add(ids["enc.qrow"], qd_row);
            (ids["enc.qs"], qd)
        }
    };
    let q = lin(g, ids, "enc.init.q", queries);
    let k = lin(g, ids, "enc.init.k", p_emb);
    let v = lin(g, ids, "enc.init.v", p_emb);
    let a = g.attention(q, k, v, cfg.n_heads);
    let att = lin(g, ids, "enc.init.o", a);
    let sum = g.add(base, att);
    let mut x = lin(g, ids, "enc.proj", sum);
    for i in 0..cfg.enc_blocks {
        x = residual_block(g, ids, &format!("enc.blk{i}"), x, None, cfg.n_heads);
    }
    let z = lin(g, ids, "enc.out", x);
    EncoderBuild { p_emb, z }
}

/// Decoder graph: embed the query positions, cross-attend to the latent
/// tokens, and emit one occupancy logit per query. Queries never attend to
/// each other, so the output is independent per query.
pub fn build_decoder<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &AeConfig,
    z: NodeId,
    queries_norm: &[[f64; 3]],
) -> NodeId {
    let tokens = lin(g, ids, "dec.in", z);
    let mut x = embed_positions(g, ids, cfg, queries_norm);
    for i in 0..cfg.dec_blocks {
        x = residual_block(g, ids, &format!("dec.blk{i}"), x, Some(tokens), cfg.n_heads);
    }
    lin(g, ids, "dec.head", x)
}

pub struct AeLossBuild {
    pub loss: NodeId,
    pub bce: NodeId,
    pub z: NodeId,
    pub logits: NodeId,
}

/// Full training objective: query BCE plus an L2 penalty on the latent tokens
/// that keeps their scale in check for the diffusion stage.
pub fn build_ae_loss<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &AeConfig,
    pts_norm: &[[f64; 3]],
    sample_idx: Option<&[usize]>,
    batch: &QueryBatch,
    latent_reg: f64,
) -> AeLossBuild {
    let enc = build_encoder(g, ids, cfg, pts_norm, sample_idx);
    let logits = build_decoder(g, ids, cfg, enc.z, &batch.queries);
    let n = batch.labels.len();
    let targets = Tensor::new(vec![n, 1], batch.labels.iter().map(|&l| T::cast(l as f64)).collect());
    let weights = Tensor::new(vec![n, 1], vec![T::one(); n]);
    let bce = g.bce_with_logits(logits, &targets, &weights);
    let loss = if latent_reg != 0.0 {
        let zsq = g.mul(enc.z, enc.z);
        let reg = g.mean_all(zsq);
        let reg = g.scale(reg, latent_reg);
        g.add(bce, reg)
    } else {
        bce
    };
    AeLossBuild { loss, bce, z: enc.z, logits }
}

/// Encode an already-normalized cloud with frozen weights.
pub fn encode_norm(
    store: &ParamStore<f32>,
    cfg: &AeConfig,
    pts_norm: &[[f64; 3]],
    sample_idx: Option<&[usize]>,
) -> Result<Tensor<f32>, AeError> {
    if pts_norm.is_empty() {
        return Err(AeError::EmptyCloud);
    }
    let mut g = Graph::<f32>::new();
    let ids = bind_params(&mut g, store, false);
    let enc = build_encoder(&mut g, &ids, cfg, pts_norm, sample_idx);
    Ok(g.value_tensor(enc.z))
}

/// Encode a metric-space cloud. `sample_seed` only matters in sample mode,
/// where it fixes which points become latent queries.
pub fn encode_cloud(
    store: &ParamStore<f32>,
    cfg: &AeConfig,
    norm: &NormalizeMap,
    pc: &PointCloud,
    sample_seed: u64,
) -> Result<Tensor<f32>, AeError> {
    if pc.points.is_empty() {
        return Err(AeError::EmptyCloud);
    }
    let pts_norm: Vec<[f64; 3]> = pc.points.iter().map(|&p| norm.forward(p)).collect();
    let idx = match cfg.query_mode {
        QueryMode::Sample => {
            let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
            Some(sample_latent_indices(pts_norm.len(), cfg.m_latent, &mut rng))
        }
        _ => None,
    };
    encode_norm(store, cfg, &pts_norm, idx.as_deref())
}

const DECODE_CHUNK: usize = 8192;

/// Occupancy probabilities at normalized query positions, evaluated in chunks.
pub fn decode_occupancy(
    store: &ParamStore<f32>,
    cfg: &AeConfig,
    z: &Tensor<f32>,
    queries_norm: &[[f64; 3]],
) -> Vec<f32> {
    let mut probs = Vec::with_capacity(queries_norm.len());
    for chunk in queries_norm.chunks(DECODE_CHUNK) {
        let mut g = Graph::<f32>::new();
        let ids = bind_params(&mut g, store, false);
        let zc = g.constant(z);
        let logits = build_decoder(&mut g, &ids, cfg, zc, chunk);
        let p = g.sigmoid(logits);
        probs.extend_from_slice(g.value(p));
    }
    probs
}

/// Decode a latent into a dense occupancy grid by thresholding the decoder's
/// probability at every cell center.
pub fn decode_grid(
    store: &ParamStore<f32>,
    cfg: &AeConfig,
    fov: &PolarFov,
    norm: &NormalizeMap,
    z: &Tensor<f32>,
    threshold: f64,
) -> Result<OccGrid, AeError> {
    match cfg.grid_mode {
        GridMode::Frustum => {
            let mut grid = FrustumGrid::empty(fov.clone());
            let mut centers = Vec::with_capacity(fov.cell_count());
            let mut cells = Vec::with_capacity(fov.cell_count());
            for i in 0..fov.n_r {
                for j in 0..fov.n_az {
                    for k in 0..fov.n_el {
                        let idx = FrustumIndex { i, j, k };
                        let (r, az, el) = fov.cell_center(idx);
                        centers.push(norm.forward(polar_to_cart(r, az, el)));
                        cells.push(idx);
                    }
                }
            }
            let probs = decode_occupancy(store, cfg, z, &centers);
            for (idx, p) in cells.into_iter().zip(probs) {
                if p as f64 > threshold {
                    grid.set(idx, true);
                }
            }
            Ok(OccGrid::Frustum(grid))
        }
        GridMode::Voxel => {
            let (lo, hi) = fov.cartesian_bbox();
            let mut grid = VoxelGrid::empty(cfg.voxel_size, lo, hi)?;
            let mut centers = Vec::new();
            let mut cells = Vec::new();
            for x in 0..grid.dims[0] {
                for y in 0..grid.dims[1] {
                    for zz in 0..grid.dims[2] {
                        let idx = [x, y, zz];
                        let c = grid.voxel_lo(idx);
                        centers.push(norm.forward([
                            c[0] + 0.5 * grid.voxel[0],
                            c[1] + 0.5 * grid.voxel[1],
                            c[2] + 0.5 * grid.voxel[2],
                        ]));
                        cells.push(idx);
                    }
                }
            }
            let probs = decode_occupancy(store, cfg, z, &centers);
            for (idx, p) in cells.into_iter().zip(probs) {
                if p as f64 > threshold {
                    grid.set(idx, true);
                }
            }
            Ok(OccGrid::Voxel(grid))
        }
    }
}

/// Round-trip a cloud through the autoencoder: encode, decode the dense grid,
/// and return the occupied cell centers alongside the grid itself.
pub fn reconstruct(
    store: &ParamStore<f32>,
    cfg: &AeConfig,
    fov: &PolarFov,
    pc: &PointCloud,
    threshold: f64,
    sample_seed: u64,
) -> Result<(PointCloud, OccGrid), AeError> {
    let norm = NormalizeMap::from_fov(fov)?;
    let z = encode_cloud(store, cfg, &norm, pc, sample_seed)?;
    let grid = decode_grid(store, cfg, fov, &norm, &z, threshold)?;
    Ok((PointCloud::new(grid.occupied_centers()), grid))
}

/// One prepared training frame: normalized input points plus the metric-space
/// occupancy target.
#[derive(Debug, Clone)]
pub struct AeFrame {
    pub pts_norm: Vec<[f64; 3]>,
    pub grid: OccGrid,
}

/// Turn dataset frames into training frames under the configured grid mode.
/// Frustum mode reuses the label grid stored with the dataset; voxel mode
/// relabels the saved cloud.
pub fn prepare_frames(
    cfg: &AeConfig,
    fov: &PolarFov,
    frames: &[FrameData],
) -> Result<Vec<AeFrame>, AeError> {
    let norm = NormalizeMap::from_fov(fov)?;
    frames
        .iter()
        .map(|f| {
            if f.lidar.points.is_empty() {
                return Err(AeError::EmptyCloud);
            }
            let grid = match cfg.grid_mode {
                GridMode::Frustum => OccGrid::Frustum(f.grid.clone()),
                GridMode::Voxel => OccGrid::from_cloud(cfg, fov, &f.lidar)?,
            };
            Ok(AeFrame {
                pts_norm: f.lidar.points.iter().map(|&p| norm.forward(p)).collect(),
                grid,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainAeConfig {
    pub epochs: usize,
    /// Frames whose gradients are averaged per optimizer step.
    pub batch_frames: usize,
    pub queries_per_frame: usize,
    pub pos_fraction: f64,
    pub lr: f64,
    pub latent_reg: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainAeConfig {
    pub fn desk_default() -> Self {
        Self {
            epochs: 30,
            batch_frames: 4,
            queries_per_frame: 512,
            pos_fraction: 0.0625,
            lr: 1e-3,
            latent_reg: 1e-4,
            grad_clip: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainStat {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
}

#[derive(Debug, Clone)]
pub struct AeTrainReport {
    pub stats: Vec<TrainStat>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Checkpoint digest when a save path was given.
    pub digest: Option<String>,
    /// Per-channel moments of the trained latents over the training frames,
    /// used to standardize diffusion targets.
    pub latent_mean: Vec<f32>,
    pub latent_std: Vec<f32>,
}

// RNG stream namespaces; frame/query streams also fold in step and slot.
const STREAM_EPOCH: u64 = 1 << 20;
const STREAM_QUERY: u64 = 1 << 40;
const STREAM_STATS: u64 = 1 << 41;

/// Train the autoencoder. `norm` is the metric-to-cube map the frames were
/// normalized with; sampled queries go through the same map. Returns the
/// weights and a report; when `out_base` is given the weights are also written
/// as a checkpoint whose config embeds the latent standardization stats.
pub fn train_autoencoder(
    cfg: &AeConfig,
    tr: &TrainAeConfig,
    norm: &NormalizeMap,
    frames: &[AeFrame],
    out_base: Option<&Path>,
) -> Result<(ParamStore<f32>, AeTrainReport), AeError> {
    cfg.validate().expect("invalid autoencoder config");
    if frames.is_empty() {
        return Err(AeError::NoFrames);
    }
    let mut init_rng = ChaCha12Rng::seed_from_u64(tr.seed);
    let mut store = init_ae_params(cfg, &mut init_rng);
    let mut adam = Adam::<f32>::new(tr.lr);
    let mut stats = Vec::new();
    let mut epoch_loss = Vec::with_capacity(tr.epochs);
    let mut step = 0usize;

    for epoch in 0..tr.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut erng = ChaCha12Rng::seed_from_u64(tr.seed);
        erng.set_stream(STREAM_EPOCH + epoch as u64);
        order.shuffle(&mut erng);

        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for chunk in order.chunks(tr.batch_frames.max(1)) {
            let jobs: Vec<(usize, u64)> = chunk
                .iter()
                .enumerate()
                .map(|(slot, &fi)| (fi, STREAM_QUERY + (step as u64) * 4096 + slot as u64))
                .collect();
            let results: Result<Vec<(GradMap<f32>, f64, f64)>, AeError> = jobs
                .par_iter()
                .map(|&(fi, stream)| {
                    let mut rng = ChaCha12Rng::seed_from_u64(tr.seed);
                    rng.set_stream(stream);
                    let frame = &frames[fi];
                    let batch = sample_queries(
                        &frame.grid,
                        norm,
                        tr.queries_per_frame,
                        tr.pos_fraction,
                        &mut rng,
                    )?;
                    let idx = match cfg.query_mode {
                        QueryMode::Sample => Some(sample_latent_indices(
                            frame.pts_norm.len(),
                            cfg.m_latent,
                            &mut rng,
                        )),
                        _ => None,
                    };
                    let mut g = Graph::<f32>::new();
                    let ids = bind_params(&mut g, &store, true);
                    let built = build_ae_loss(
                        &mut g,
                        &ids,
                        cfg,
                        &frame.pts_norm,
                        idx.as_deref(),
                        &batch,
                        tr.latent_reg,
                    );
                    g.backward(built.loss);
                    let loss = g.value(built.loss)[0] as f64;
                    let bce = g.value(built.bce)[0] as f64;
                    Ok((collect_grads(&g, &ids), loss, bce))
                })
                .collect();
            let results = results?;

            let mut acc: GradMap<f32> = GradMap::new();
            for (gm, _, _) in &results {
                accumulate_grads(&mut acc, gm);
            }
            scale_grads(&mut acc, 1.0 / results.len() as f64);
            clip_global_norm(&mut acc, tr.grad_clip);
            adam.step(&mut store, &acc);

            let loss = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
            let bce = results.iter().map(|r| r.2).sum::<f64>() / results.len() as f64;
            if !loss.is_finite() {
                return Err(AeError::Diverged { step, loss });
            }
            epoch_sum += loss;
            epoch_n += 1;
            stats.push(TrainStat { step, epoch, loss, bce });
            step += 1;
        }
        epoch_loss.push(epoch_sum / epoch_n.max(1) as f64);
    }

    let (latent_mean, latent_std) = latent_moments(cfg, tr.seed, frames, &store)?;

    let digest = match out_base {
        Some(base) => {
            let meta = CkptMeta {
                kind: "autoencoder".into(),
                parent_digest: None,
                config: serde_json::json!({
                    "ae": cfg,
                    "train": tr,
                    "latent_mean": latent_mean,
                    "latent_std": latent_std,
                }),
            };
            Some(save_checkpoint(base, &meta, &store)?)
        }
        None => None,
    };

    let report = AeTrainReport { stats, epoch_loss, digest, latent_mean, latent_std };
    Ok((store, report))
}

/// Per-channel mean and standard deviation of encoded latents across frames.
fn latent_moments(
    cfg: &AeConfig,
    seed: u64,
    frames: &[AeFrame],
    store: &ParamStore<f32>,
) -> Result<(Vec<f32>, Vec<f32>), AeError> {
    let zs: Result<Vec<Tensor<f32>>, AeError> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let idx = match cfg.query_mode {
                QueryMode::Sample => {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed);
                    rng.set_stream(STREAM_STATS + i as u64);
                    Some(sample_latent_indices(f.pts_norm.len(), cfg.m_latent, &mut rng))
                }
                _ => None,
            };
            encode_norm(store, cfg, &f.pts_norm, idx.as_deref())
        })
        .collect();
    let zs = zs?;
    let d = cfg.d_latent;
    let mut sum = vec![0f64; d];
    let mut sumsq = vec![0f64; d];
    let mut count = 0usize;
    for z in &zs {
        for row in 0..z.rows() {
            for c in 0..d {
                let v = z.data[row * d + c] as f64;
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        count += z.rows();
    }
    let mean: Vec<f32> = sum.iter().map(|&s| (s / count as f64) as f32).collect();
    let std: Vec<f32> = (0..d)
        .map(|c| {
            let m = sum[c] / count as f64;
            let var = (sumsq[c] / count as f64 - m * m).max(1e-12);
            var.sqrt() as f32
        })
        .collect();
    Ok((mean, std))
}
