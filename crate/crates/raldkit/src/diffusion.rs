//! Latent diffusion over the autoencoder's token sets, conditioned on radar
//! spectra.
//!
//! Two noise parameterizations ship side by side. The `ddpm` path is the
//! classic discrete-time chain: z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε with ε-prediction
//! training and ancestral sampling. The `edm` path works in continuous σ with
//! the preconditioned denoiser D(x,σ) = c_skip·x + c_out·F(c_in·x, c_noise)
//! and a deterministic 2nd-order Heun integration over a ρ-spaced σ grid; it
//! is the default sampler.
//!
//! The denoiser is a small transformer over the M latent tokens: each block
//! applies noise-level modulation (shift/scale/gate read from a learned
//! embedding of t or ln σ, all zero-initialized so every block starts as the
//! identity), self-attention, cross-attention to radar condition tokens, and
//! an MLP. Radar conditioning arrives either through a convolutional spectrum
//! encoder ([`encode_radar`]) or, for the encoder-off ablation, as the raw
//! upsampled spectrum cells embedded directly ([`raw_condition_tokens`]).
//! Zeroing the cross-attention value path ([`zero_cross_attention`]) makes
//! the conditioned model bit-identical to the unconditional one, which is the
//! switch the conditioning ablations are built on.
//!
//! Latents are standardized per channel ([`LatentStats`]) before any noise is
//! added, so the schedule's data scale is 1 by construction. Checkpoints
//! record the frozen autoencoder's digest as their parent; samplers
//! downstream refuse a decoder that doesn't match.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoenc::{encode_cloud, position_features, AeConfig, AeError};
use crate::geom::NormalizeMap;
use crate::nn::ckpt::{save_checkpoint, CkptError, CkptMeta};
use crate::nn::opt::{
    accumulate_grads, bind_params, clip_global_norm, collect_grads, scale_grads, uniform_init,
    xavier_uniform, GradMap,
};
use crate::nn::{Adam, Graph, NodeId, ParamStore, Real, Tensor};
use crate::radar::{upsample_spectrum, RadarError, SpectrumCube};
use crate::scene::FrameData;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={t_max}")]
    BadTimestep { t: usize, t_max: usize },
    #[error("operation requires the {want} schedule but the config uses {got}")]
    ScheduleMode { want: &'static str, got: &'static str },
    #[error("spectrum cube is {got:?} but the radar encoder expects {want:?}")]
    CubeDims { got: [usize; 3], want: [usize; 3] },
    #[error("latents are {got:?} but the model expects {want:?} tokens x channels")]
    LatentShape { got: (usize, usize), want: (usize, usize) },
    #[error("conditioning source needs a spectrum but the frame has none")]
    MissingSpectrum,
    #[error("autoencoder checkpoint config lacks usable latent stats: {0}")]
    MissingStats(String),
    #[error("loss is not finite: {loss}")]
    NonFinite { loss: f64 },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("no training frames")]
    NoFrames,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Radar(#[from] RadarError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Autoenc(#[from] AeError),
}

// ---------------------------------------------------------------------------
// Noise schedules
// ---------------------------------------------------------------------------

/// Discrete-time schedule parameters; β ramps linearly over `t_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmParams {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// Continuous-σ schedule parameters. `sigma_data` is the scale of the clean
/// latents (1 once they are standardized); training noise levels are drawn
/// log-normally from (p_mean, p_std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdmParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSchedule {
    Ddpm(DdpmParams),
    Edm(EdmParams),
}

impl NoiseSchedule {
    /// 100 steps with β up to 0.1, which drives ᾱ_T below 1e-2 so the
    /// terminal marginal is effectively the prior.
    pub fn ddpm_default() -> Self {
        NoiseSchedule::Ddpm(DdpmParams { t_steps: 100, beta_min: 1e-4, beta_max: 0.1 })
    }

    pub fn edm_default() -> Self {
        NoiseSchedule::Edm(EdmParams {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            n_steps: 18,
            sigma_data: 1.0,
            p_mean: -1.2,
            p_std: 1.2,
        })
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            NoiseSchedule::Ddpm(_) => "ddpm",
            NoiseSchedule::Edm(_) => "edm",
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        match self {
            NoiseSchedule::Ddpm(p) => {
                if p.t_steps == 0 {
                    return Err(DiffusionError::BadConfig("t_steps must be >= 1".into()));
                }
                if !(0.0 < p.beta_min && p.beta_min <= p.beta_max && p.beta_max < 1.0) {
                    return Err(DiffusionError::BadConfig(
                        "need 0 < beta_min <= beta_max < 1".into(),
                    ));
                }
            }
            NoiseSchedule::Edm(p) => {
                if !(0.0 < p.sigma_min && p.sigma_min < p.sigma_max) {
                    return Err(DiffusionError::BadConfig("need 0 < sigma_min < sigma_max".into()));
                }
                if p.rho <= 0.0 || p.n_steps == 0 || p.sigma_data <= 0.0 || p.p_std <= 0.0 {
                    return Err(DiffusionError::BadConfig(
                        "rho, n_steps, sigma_data, p_std must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// β and ᾱ tables computed from [`DdpmParams`]; indices are 1-based
/// timesteps, matching the forward process z_t.
#[derive(Debug, Clone)]
pub struct DdpmTables {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DdpmTables {
    pub fn new(p: &DdpmParams) -> Self {
        let t_steps = p.t_steps.max(1);
        let beta: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    p.beta_min
                } else {
                    p.beta_min + (p.beta_max - p.beta_min) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Self { beta, alpha_bar }
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_max() {
            return Err(DiffusionError::BadTimestep { t, t_max: self.t_max() });
        }
        Ok(())
    }
}

impl EdmParams {
    /// Integration grid: `n_steps + 1` noise levels from σ_max down through
    /// σ_min to exactly 0, spaced so σ^(1/ρ) is linear in the step index.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        let mut grid = Vec::with_capacity(n + 1);
        if n == 1 {
            grid.push(self.sigma_max);
        } else {
            let a = self.sigma_max.powf(1.0 / self.rho);
            let b = self.sigma_min.powf(1.0 / self.rho);
            for i in 0..n {
                let u = i as f64 / (n - 1) as f64;
                grid.push((a + u * (b - a)).powf(self.rho));
            }
        }
        grid.push(0.0);
        grid
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        sigma * sd / (sigma * sigma + sd * sd).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }

    /// λ(σ) = 1/c_out², the weight that makes the denoiser loss unit-variance
    /// across noise levels.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let c = self.c_out(sigma);
        1.0 / (c * c)
    }

    pub fn sample_sigma(&self, rng: &mut ChaCha12Rng) -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        (self.p_mean + self.p_std * n).exp()
    }
}

// ---------------------------------------------------------------------------
// Forward and reverse diffusion math
// ---------------------------------------------------------------------------

pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Tensor<f32> {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε.
pub fn ddpm_forward_noise(
    z0: &Tensor<f32>,
    t: usize,
    eps: &Tensor<f32>,
    tab: &DdpmTables,
) -> Result<Tensor<f32>, DiffusionError> {
    tab.check_t(t)?;
    assert_eq!(z0.shape, eps.shape, "noise shape must match latents");
    let ab = tab.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&z, &e)| (s * z as f64 + n * e as f64) as f32)
        .collect();
    Ok(Tensor::new(z0.shape.clone(), data))
}

/// z_σ = z₀ + σ ε.
pub fn edm_forward_noise(z0: &Tensor<f32>, sigma: f64, eps: &Tensor<f32>) -> Tensor<f32> {
    assert_eq!(z0.shape, eps.shape, "noise shape must match latents");
    let data = z0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&z, &e)| (z as f64 + sigma * e as f64) as f32)
        .collect();
    Tensor::new(z0.shape.clone(), data)
}

/// One ancestral step: μ = (z_t − β_t/√(1−ᾱ_t) ε̂)/√α_t, plus √β_t gaussian
/// noise everywhere except the final step t=1, which is deterministic.
pub fn ddpm_reverse_step(
    z_t: &Tensor<f32>,
    t: usize,
    eps_hat: &Tensor<f32>,
    tab: &DdpmTables,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<f32>, DiffusionError> {
    tab.check_t(t)?;
    assert_eq!(z_t.shape, eps_hat.shape, "prediction shape must match latents");
    let beta = tab.beta(t);
    let alpha = 1.0 - beta;
    let ab = tab.alpha_bar(t);
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sd = if t > 1 { beta.sqrt() } else { 0.0 };
    let data = z_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(&z, &e)| {
            let mu = inv * (z as f64 - coef * e as f64);
            let noise = if t > 1 { rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            (mu + sd * noise) as f32
        })
        .collect();
    Ok(Tensor::new(z_t.shape.clone(), data))
}

// ---------------------------------------------------------------------------
// Denoiser configuration and parameters
// ---------------------------------------------------------------------------

/// How condition tokens enter the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Dedicated cross-attention sublayer per block (default).
    CrossAttn,
    /// Condition tokens are projected and appended to the self-attention
    /// keys/values instead; no separate cross-attention sublayer.
    ConcatTokens,
}

/// Where condition tokens come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondSource {
    /// No conditioning at all; the denoiser models the latent prior.
    Unconditional,
    /// Raw upsampled spectrum cells embedded directly (the encoder-off
    /// ablation arm).
    RawSpectrum,
    /// Convolutional spectrum encoder (the full model).
    RadarEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Latent token count the model is trained for.
    pub m_latent: usize,
    /// Latent channel count.
    pub d_latent: usize,
    /// Channel count of incoming condition tokens.
    pub d_cond: usize,
    pub cond: CondMode,
}

impl DiTConfig {
    pub fn desk_default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            m_latent: 64,
            d_latent: 16,
            d_cond: 16,
            cond: CondMode::CrossAttn,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.depth == 0 {
            return Err(DiffusionError::BadConfig("depth must be >= 1".into()));
        }
        if self.width == 0 || self.width % self.heads != 0 || self.width % 2 != 0 {
            return Err(DiffusionError::BadConfig(
                "width must be even and divisible by heads".into(),
            ));
        }
        if self.m_latent == 0 || self.d_latent == 0 || self.d_cond == 0 {
            return Err(DiffusionError::BadConfig("token and channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Spectrum-to-tokens encoder: upsample in angle, log1p, three conv blocks
/// that stride 2 in range only (angular resolution is kept, range is pooled),
/// then per-cell sinusoidal position features projected onto the channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarEncConfig {
    /// Input cube dims (n_r, n_az, n_el) before upsampling.
    pub expect_dims: [usize; 3],
    pub upsample: (usize, usize, usize),
    pub channels: [usize; 3],
    pub kernel: usize,
    /// Octaves in the sinusoidal position features.
    pub bands: usize,
}

impl RadarEncConfig {
    pub fn desk_default() -> Self {
        Self {
            expect_dims: [160, 8, 4],
            upsample: (1, 2, 2),
            channels: [8, 16, 16],
            kernel: 3,
            bands: 4,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(DiffusionError::BadConfig("kernel must be odd".into()));
        }
        if self.upsample.0 == 0 || self.upsample.1 == 0 || self.upsample.2 == 0 {
            return Err(DiffusionError::BadConfig("upsample factors must be >= 1".into()));
        }
        if self.channels.iter().any(|&c| c == 0) || self.expect_dims.iter().any(|&d| d == 0) {
            return Err(DiffusionError::BadConfig("channels and dims must be >= 1".into()));
        }
        Ok(())
    }

    fn upsampled_dims(&self) -> [usize; 3] {
        [
            self.expect_dims[0] * self.upsample.0,
            self.expect_dims[1] * self.upsample.1,
            self.expect_dims[2] * self.upsample.2,
        ]
    }

    /// Feature-map dims after the three conv blocks; the token count is their
    /// product.
    pub fn out_dims(&self) -> [usize; 3] {
        let k = self.kernel;
        let pad = k / 2;
        let mut d = self.upsampled_dims();
        for _ in 0..3 {
            d[0] = (d[0] + 2 * pad - k) / 2 + 1;
            d[1] = (d[1] + 2 * pad - k) + 1;
            d[2] = (d[2] + 2 * pad - k) + 1;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmConfig {
    pub dit: DiTConfig,
    pub renc: RadarEncConfig,
    pub cond_source: CondSource,
    pub schedule: NoiseSchedule,
}

impl DmConfig {
    pub fn desk_default() -> Self {
        Self {
            dit: DiTConfig::desk_default(),
            renc: RadarEncConfig::desk_default(),
            cond_source: CondSource::RadarEncoder,
            schedule: NoiseSchedule::edm_default(),
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        self.dit.validate()?;
        self.renc.validate()?;
        self.schedule.validate()?;
        if self.cond_source == CondSource::RadarEncoder && self.dit.d_cond != self.renc.channels[2]
        {
            return Err(DiffusionError::BadConfig(format!(
                "d_cond {} must equal the radar encoder's final channel count {}",
                self.dit.d_cond, self.renc.channels[2]
            )));
        }
        Ok(())
    }
}

fn posenc_dim(bands: usize) -> usize {
    3 + 6 * bands
}

/// Denoiser weights. Modulation and head layers start at zero, so the whole
/// network is the zero function at init and every block begins as identity.
pub fn init_dit_params(cfg: &DiTConfig, rng: &mut ChaCha12Rng) -> ParamStore<f32> {
    cfg.validate().expect("invalid denoiser config");
    let w = cfg.width;
    let mut s = ParamStore::new();
    s.insert("dit.in.w", xavier_uniform(rng, cfg.d_latent, w));
    s.insert("dit.in.b", Tensor::zeros(vec![1, w]));
    s.insert("dit.noise.w1", xavier_uniform(rng, w, w));
    s.insert("dit.noise.b1", Tensor::zeros(vec![1, w]));
    s.insert("dit.noise.w2", xavier_uniform(rng, w, w));
    s.insert("dit.noise.b2", Tensor::zeros(vec![1, w]));
    for i in 0..cfg.depth {
        let p = format!("dit.blk{i}");
        for nm in ["q", "k", "v", "o"] {
            s.insert(&format!("{p}.sa.{nm}.w"), xavier_uniform(rng, w, w));
            s.insert(&format!("{p}.sa.{nm}.b"), Tensor::zeros(vec![1, w]));
        }
        if cfg.cond == CondMode::CrossAttn {
            for nm in ["q", "o"] {
                s.insert(&format!("{p}.ca.{nm}.w"), xavier_uniform(rng, w, w));
                s.insert(&format!("{p}.ca.{nm}.b"), Tensor::zeros(vec![1, w]));
            }
            for nm in ["k", "v"] {
                s.insert(&format!("{p}.ca.{nm}.w"), xavier_uniform(rng, cfg.d_cond, w));
                s.insert(&format!("{p}.ca.{nm}.b"), Tensor::zeros(vec![1, w]));
            }
        }
        s.insert(&format!("{p}.mlp.w1"), xavier_uniform(rng, w, 2 * w));
        s.insert(&format!("{p}.mlp.b1"), Tensor::zeros(vec![1, 2 * w]));
        s.insert(&format!("{p}.mlp.w2"), xavier_uniform(rng, 2 * w, w));
        s.insert(&format!("{p}.mlp.b2"), Tensor::zeros(vec![1, w]));
        s.insert(&format!("{p}.ada.w"), Tensor::zeros(vec![w, 9 * w]));
        s.insert(&format!("{p}.ada.b"), Tensor::zeros(vec![1, 9 * w]));
    }
    if cfg.cond == CondMode::ConcatTokens {
        s.insert("dit.cond.proj.w", xavier_uniform(rng, cfg.d_cond, w));
        s.insert("dit.cond.proj.b", Tensor::zeros(vec![1, w]));
    }
    s.insert("dit.final.ada.w", Tensor::zeros(vec![w, 2 * w]));
    s.insert("dit.final.ada.b", Tensor::zeros(vec![1, 2 * w]));
    s.insert("dit.head.w", Tensor::zeros(vec![w, cfg.d_latent]));
    s.insert("dit.head.b", Tensor::zeros(vec![1, cfg.d_latent]));
    s
}

pub fn init_radar_enc_params(cfg: &RadarEncConfig, rng: &mut ChaCha12Rng) -> ParamStore<f32> {
    cfg.validate().expect("invalid radar encoder config");
    let mut s = ParamStore::new();
    let k3 = cfg.kernel.pow(3);
    let mut c_in = 1usize;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        let fan_in = c_in * k3;
        let limit = (6.0 / (fan_in + c_out) as f64).sqrt();
        s.insert(&format!("renc.c{i}.w"), uniform_init(rng, vec![c_out, fan_in], limit));
        s.insert(&format!("renc.c{i}.b"), Tensor::zeros(vec![1, c_out]));
        c_in = c_out;
    }
    s.insert("renc.pos.w", xavier_uniform(rng, posenc_dim(cfg.bands), cfg.channels[2]));
    s.insert("renc.pos.b", Tensor::zeros(vec![1, cfg.channels[2]]));
    s
}

/// Embedding for the encoder-off ablation: each upsampled spectrum cell
/// becomes a token via a 1-channel lift plus projected position features.
pub fn init_raw_cond_params(
    cfg: &RadarEncConfig,
    d_cond: usize,
    rng: &mut ChaCha12Rng,
) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert("rawcond.val.w", xavier_uniform(rng, 1, d_cond));
    s.insert("rawcond.val.b", Tensor::zeros(vec![1, d_cond]));
    s.insert("rawcond.pos.w", xavier_uniform(rng, posenc_dim(cfg.bands), d_cond));
    s.insert("rawcond.pos.b", Tensor::zeros(vec![1, d_cond]));
    s
}

/// All weights the chosen conditioning source needs, in one store.
pub fn init_dm_params(dm: &DmConfig, rng: &mut ChaCha12Rng) -> ParamStore<f32> {
    dm.validate().expect("invalid diffusion config");
    let mut s = init_dit_params(&dm.dit, rng);
    let extra = match dm.cond_source {
        CondSource::Unconditional => ParamStore::new(),
        CondSource::RadarEncoder => init_radar_enc_params(&dm.renc, rng),
        CondSource::RawSpectrum => init_raw_cond_params(&dm.renc, dm.dit.d_cond, rng),
    };
    for (name, t) in extra.iter() {
        s.insert(name, t.clone());
    }
    s
}

/// Zero the cross-attention value path and output bias so the conditioned
/// forward pass equals the unconditional one exactly. This is the switch the
/// conditioning ablation flips.
pub fn zero_cross_attention(store: &mut ParamStore<f32>) {
    for name in store.names() {
        if name.contains(".ca.v.") || name.ends_with(".ca.o.b") {
            let t = store.get_mut(&name);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Denoiser graph
// ---------------------------------------------------------------------------

fn lin<T: Real>(g: &mut Graph<T>, ids: &BTreeMap<String, NodeId>, pfx: &str, x: NodeId) -> NodeId {
    g.linear(x, ids[&format!("{pfx}.w") as &str], ids[&format!("{pfx}.b") as &str])
}

/// LayerNorm without learned affine; scale and shift come from modulation.
fn plain_ln<T: Real>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let w = g.shape(x)[1];
    let ones = g.constant(&Tensor::new(vec![1, w], vec![T::one(); w]));
    let zeros = g.constant(&Tensor::zeros(vec![1, w]));
    g.layer_norm(x, ones, zeros, LN_EPS)
}

/// h·(1 + scale) + shift with row-broadcast scale/shift.
fn modulate<T: Real>(g: &mut Graph<T>, h: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
    let hs = g.mul(h, scale);
    let h1 = g.add(h, hs);
    g.add(h1, shift)
}

fn concat_rows<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> NodeId {
    let at = g.transpose(a);
    let bt = g.transpose(b);
    let c = g.concat_cols(at, bt);
    g.transpose(c)
}

/// Multi-frequency sin/cos features of the scalar noise input (the timestep
/// in ddpm mode, ln(σ)/4 in edm mode). Frequencies span four decades so both
/// integer steps up to a few hundred and ln-σ scale values resolve.
fn noise_features<T: Real>(s: f64, width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut data = Vec::with_capacity(width);
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let omega = (-(10_000f64.ln()) * i as f64 / denom).exp();
        data.push(T::cast((s * omega).sin()));
        data.push(T::cast((s * omega).cos()));
    }
    Tensor::new(vec![1, width], data)
}

/// Denoiser forward graph. `noise_s` is the raw scalar fed to the noise
/// embedding; `cond` are condition tokens `[n, d_cond]` or None for the
/// unconditional model. Returns the `[M, d_latent]` network output F.
pub fn build_dit<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &DiTConfig,
    z: NodeId,
    noise_s: f64,
    cond: Option<NodeId>,
) -> NodeId {
    assert_eq!(g.shape(z)[1], cfg.d_latent, "latent channel mismatch");
    if let Some(c) = cond {
        assert_eq!(g.shape(c)[1], cfg.d_cond, "condition channel mismatch");
    }
    let mut x = lin(g, ids, "dit.in", z);
    let nf = noise_features::<T>(noise_s, cfg.width);
    let nfc = g.constant(&nf);
    let h = g.linear(nfc, ids["dit.noise.w1"], ids["dit.noise.b1"]);
    let h = g.gelu(h);
    let e = g.linear(h, ids["dit.noise.w2"], ids["dit.noise.b2"]);

    let proj_cond = match (cfg.cond, cond) {
        (CondMode::ConcatTokens, Some(c)) => Some(lin(g, ids, "dit.cond.proj", c)),
        _ => None,
    };

    let w = cfg.width;
    for i in 0..cfg.depth {
        let p = format!("dit.blk{i}");
        let m9 = lin(g, ids, &format!("{p}.ada"), e);
        let chunk = |g: &mut Graph<T>, j: usize| g.slice_cols(m9, j * w, w);

        // Self-attention sublayer; in concat mode the condition tokens join
        // the keys/values here.
        let (sh, sc, gate) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
        let h = plain_ln(g, x);
        let h = modulate(g, h, sh, sc);
        let kv = match proj_cond {
            Some(c) => concat_rows(g, h, c),
            None => h,
        };
        let q = lin(g, ids, &format!("{p}.sa.q"), h);
        let k = lin(g, ids, &format!("{p}.sa.k"), kv);
        let v = lin(g, ids, &format!("{p}.sa.v"), kv);
        let a = g.attention(q, k, v, cfg.heads);
        let o = lin(g, ids, &format!("{p}.sa.o"), a);
        let gated = g.mul(o, gate);
        x = g.add(x, gated);

        // Cross-attention sublayer (cross-attn mode with conditioning only).
        if cfg.cond == CondMode::CrossAttn {
            if let Some(c) = cond {
                let (sh, sc, gate) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));
                let h = plain_ln(g, x);
                let h = modulate(g, h, sh, sc);
                let q = lin(g, ids, &format!("{p}.ca.q"), h);
                let k = lin(g, ids, &format!("{p}.ca.k"), c);
                let v = lin(g, ids, &format!("{p}.ca.v"), c);
                let a = g.attention(q, k, v, cfg.heads);
                let o = lin(g, ids, &format!("{p}.ca.o"), a);
                let gated = g.mul(o, gate);
                x = g.add(x, gated);
            }
        }

        // MLP sublayer.
        let (sh, sc, gate) = (chunk(g, 6), chunk(g, 7), chunk(g, 8));
        let h = plain_ln(g, x);
        let h = modulate(g, h, sh, sc);
        let m = g.linear(h, ids[&format!("{p}.mlp.w1") as &str], ids[&format!("{p}.mlp.b1") as &str]);
        let m = g.gelu(m);
        let m = g.linear(m, ids[&format!("{p}.mlp.w2") as &str], ids[&format!("{p}.mlp.b2") as &str]);
        let gated = g.mul(m, gate);
        x = g.add(x, gated);
    }

    let m2 = lin(g, ids, "dit.final.ada", e);
    let sh = g.slice_cols(m2, 0, w);
    let sc = g.slice_cols(m2, w, w);
    let h = plain_ln(g, x);
    let h = modulate(g, h, sh, sc);
    lin(g, ids, "dit.head", h)
}

/// Plain forward pass of the raw network F.
pub fn dit_forward(
    store: &ParamStore<f32>,
    cfg: &DiTConfig,
    z: &Tensor<f32>,
    noise_s: f64,
    cond: Option<&Tensor<f32>>,
) -> Tensor<f32> {
    let mut g = Graph::<f32>::new();
    let ids = bind_params(&mut g, store, false);
    let zc = g.constant(z);
    let cc = cond.map(|c| g.constant(c));
    let out = build_dit(&mut g, &ids, cfg, zc, noise_s, cc);
    g.value_tensor(out)
}

fn lincomb(a: f64, x: &Tensor<f32>, b: f64, y: &Tensor<f32>) -> Tensor<f32> {
    assert_eq!(x.shape, y.shape);
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&xi, &yi)| (a * xi as f64 + b * yi as f64) as f32)
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Preconditioned denoiser D(x, σ) = c_skip·x + c_out·F(c_in·x, ln σ/4).
pub fn edm_denoise(
    store: &ParamStore<f32>,
    cfg: &DiTConfig,
    edm: &EdmParams,
    x: &Tensor<f32>,
    sigma: f64,
    cond: Option<&Tensor<f32>>,
) -> Tensor<f32> {
    let xin = lincomb(edm.c_in(sigma), x, 0.0, x);
    let f = dit_forward(store, cfg, &xin, edm.c_noise(sigma), cond);
    lincomb(edm.c_skip(sigma), x, edm.c_out(sigma), &f)
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Deterministic 2nd-order Heun integration of dx/dσ = (x − D(x,σ))/σ along
/// `grid` (descending, last entry 0), starting from `init`. The step into
/// σ = 0 falls back to plain Euler since the slope needs D at σ > 0.
pub fn edm_heun_integrate<D>(denoise: &D, grid: &[f64], init: &Tensor<f32>) -> Tensor<f32>
where
    D: Fn(&Tensor<f32>, f64) -> Tensor<f32>,
{
    let slope = |x: &Tensor<f32>, d: &Tensor<f32>, sigma: f64| lincomb(1.0 / sigma, x, -1.0 / sigma, d);
    let mut x = init.clone();
    for w in grid.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        if s1 == 0.0 {
            // The Euler step into σ = 0 is x + (0 − σ)(x − D)/σ = D; taking
            // the denoiser output directly avoids the cancellation error.
            x = denoise(&x, s0);
            continue;
        }
        let d0 = {
            let den = denoise(&x, s0);
            slope(&x, &den, s0)
        };
        let xn = lincomb(1.0, &x, s1 - s0, &d0);
        let den = denoise(&xn, s1);
        let d1 = slope(&xn, &den, s1);
        let avg = lincomb(0.5, &d0, 0.5, &d1);
        x = lincomb(1.0, &x, s1 - s0, &avg);
    }
    x
}

/// Draw one latent set with the deterministic σ-grid sampler. The rng only
/// seeds the initial gaussian, so a fixed seed gives an identical sample.
pub fn edm_heun_sample(
    store: &ParamStore<f32>,
    dm: &DmConfig,
    cond: Option<&RadarTokens>,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<f32>, DiffusionError> {
    let edm = match &dm.schedule {
        NoiseSchedule::Edm(p) => p,
        other => {
            return Err(DiffusionError::ScheduleMode { want: "edm", got: other.mode_name() })
        }
    };
    let grid = edm.sigma_grid();
    let noise = standard_normal(dm.dit.m_latent, dm.dit.d_latent, rng);
    let init = lincomb(grid[0], &noise, 0.0, &noise);
    let cond_t = cond.map(|c| &c.tokens);
    Ok(edm_heun_integrate(
        &|x: &Tensor<f32>, s: f64| edm_denoise(store, &dm.dit, edm, x, s, cond_t),
        &grid,
        &init,
    ))
}

/// Full T-step ancestral sampler for the discrete chain.
pub fn ddpm_sample(
    store: &ParamStore<f32>,
    dm: &DmConfig,
    cond: Option<&RadarTokens>,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor<f32>, DiffusionError> {
    let params = match &dm.schedule {
        NoiseSchedule::Ddpm(p) => p,
        other => {
            return Err(DiffusionError::ScheduleMode { want: "ddpm", got: other.mode_name() })
        }
    };
    let tab = DdpmTables::new(params);
    let cond_t = cond.map(|c| &c.tokens);
    let mut z = standard_normal(dm.dit.m_latent, dm.dit.d_latent, rng);
    for t in (1..=tab.t_max()).rev() {
        let eps_hat = dit_forward(store, &dm.dit, &z, t as f64, cond_t);
        z = ddpm_reverse_step(&z, t, &eps_hat, &tab, rng)?;
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Radar conditioning
// ---------------------------------------------------------------------------

/// Condition tokens plus the feature-map dims they were flattened from.
#[derive(Debug, Clone)]
pub struct RadarTokens {
    pub tokens: Tensor<f32>,
    pub grid_dims: [usize; 3],
}

/// Cell centers of a (d, h, w) grid in [-1, 1]^3, ordered to match
/// `chw_to_tokens` flattening.
fn token_positions(dims: [usize; 3]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for zd in 0..dims[0] {
        for zh in 0..dims[1] {
            for zw in 0..dims[2] {
                out.push([
                    (zd as f64 + 0.5) / dims[0] as f64 * 2.0 - 1.0,
                    (zh as f64 + 0.5) / dims[1] as f64 * 2.0 - 1.0,
                    (zw as f64 + 0.5) / dims[2] as f64 * 2.0 - 1.0,
                ]);
            }
        }
    }
    out
}

/// Upsample + log1p; the fixed preprocessing shared by both conditioners.
fn prepared_cube<T: Real>(
    cfg: &RadarEncConfig,
    cube: &SpectrumCube,
) -> Result<(Tensor<T>, [usize; 3]), DiffusionError> {
    let got = [cube.fov.n_r, cube.fov.n_az, cube.fov.n_el];
    if got != cfg.expect_dims {
        return Err(DiffusionError::CubeDims { got, want: cfg.expect_dims });
    }
    let up = upsample_spectrum(cube, cfg.upsample)?;
    let dims = [up.fov.n_r, up.fov.n_az, up.fov.n_el];
    let data: Vec<T> = up.data.iter().map(|&v| T::cast((v as f64).ln_1p())).collect();
    Ok((Tensor::new(vec![1, dims[0], dims[1], dims[2]], data), dims))
}

/// Conv-encoder condition tokens as graph nodes, so training reaches the
/// encoder weights.
pub fn build_radar_encoder<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &RadarEncConfig,
    cube: &SpectrumCube,
) -> Result<NodeId, DiffusionError> {
    let (prep, _) = prepared_cube::<T>(cfg, cube)?;
    let mut x = g.constant(&prep);
    let pad = cfg.kernel / 2;
    for i in 0..3 {
        let w = ids[&format!("renc.c{i}.w") as &str];
        let b = ids[&format!("renc.c{i}.b") as &str];
        x = g.conv3d(x, w, b, cfg.kernel, [2, 1, 1], pad);
        x = g.gelu(x);
    }
    let tokens = g.chw_to_tokens(x);
    let pos = position_features::<T>(&token_positions(cfg.out_dims()), cfg.bands);
    let posc = g.constant(&pos);
    let pose = lin(g, ids, "renc.pos", posc);
    Ok(g.add(tokens, pose))
}

/// Encoder-off conditioning: one token per upsampled spectrum cell, value
/// lifted to `d_cond` channels plus projected position features.
pub fn build_raw_conditioner<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &RadarEncConfig,
    cube: &SpectrumCube,
) -> Result<NodeId, DiffusionError> {
    let (prep, dims) = prepared_cube::<T>(cfg, cube)?;
    let n = dims[0] * dims[1] * dims[2];
    let vals = Tensor::new(vec![n, 1], prep.data);
    let vc = g.constant(&vals);
    let lifted = lin(g, ids, "rawcond.val", vc);
    let pos = position_features::<T>(&token_positions(dims), cfg.bands);
    let posc = g.constant(&pos);
    let pose = lin(g, ids, "rawcond.pos", posc);
    Ok(g.add(lifted, pose))
}

/// Run the conv spectrum encoder outside any training graph.
pub fn encode_radar(
    store: &ParamStore<f32>,
    cfg: &RadarEncConfig,
    cube: &SpectrumCube,
) -> Result<RadarTokens, DiffusionError> {
    let mut g = Graph::<f32>::new();
    let ids = bind_params(&mut g, store, false);
    let node = build_radar_encoder(&mut g, &ids, cfg, cube)?;
    Ok(RadarTokens { tokens: g.value_tensor(node), grid_dims: cfg.out_dims() })
}

pub fn raw_condition_tokens(
    store: &ParamStore<f32>,
    cfg: &RadarEncConfig,
    cube: &SpectrumCube,
) -> Result<RadarTokens, DiffusionError> {
    let mut g = Graph::<f32>::new();
    let ids = bind_params(&mut g, store, false);
    let node = build_raw_conditioner(&mut g, &ids, cfg, cube)?;
    let dims = [
        cfg.expect_dims[0] * cfg.upsample.0,
        cfg.expect_dims[1] * cfg.upsample.1,
        cfg.expect_dims[2] * cfg.upsample.2,
    ];
    Ok(RadarTokens { tokens: g.value_tensor(node), grid_dims: dims })
}

/// Dispatch on the configured conditioning source. Returns None for the
/// unconditional model.
pub fn condition_tokens(
    store: &ParamStore<f32>,
    dm: &DmConfig,
    cube: Option<&SpectrumCube>,
) -> Result<Option<RadarTokens>, DiffusionError> {
    match dm.cond_source {
        CondSource::Unconditional => Ok(None),
        CondSource::RadarEncoder => {
            let cube = cube.ok_or(DiffusionError::MissingSpectrum)?;
            Ok(Some(encode_radar(store, &dm.renc, cube)?))
        }
        CondSource::RawSpectrum => {
            let cube = cube.ok_or(DiffusionError::MissingSpectrum)?;
            Ok(Some(raw_condition_tokens(store, &dm.renc, cube)?))
        }
    }
}

fn build_cond_node<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    dm: &DmConfig,
    spectrum: Option<&SpectrumCube>,
) -> Result<Option<NodeId>, DiffusionError> {
    match dm.cond_source {
        CondSource::Unconditional => Ok(None),
        CondSource::RadarEncoder => {
            let cube = spectrum.ok_or(DiffusionError::MissingSpectrum)?;
            Ok(Some(build_radar_encoder(g, ids, &dm.renc, cube)?))
        }
        CondSource::RawSpectrum => {
            let cube = spectrum.ok_or(DiffusionError::MissingSpectrum)?;
            Ok(Some(build_raw_conditioner(g, ids, &dm.renc, cube)?))
        }
    }
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

/// One training draw: the noise level and the gaussian applied to z₀. Drawn
/// once per item so a loss build is a pure function of it (finite-difference
/// checks rebuild the same loss repeatedly).
#[derive(Debug, Clone)]
pub enum NoiseDraw<T> {
    Ddpm { t: usize, eps: Tensor<T> },
    Edm { sigma: f64, eps: Tensor<T> },
}

pub fn draw_noise<T: Real>(
    sched: &NoiseSchedule,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha12Rng,
) -> NoiseDraw<T> {
    let eps = {
        let data = (0..rows * cols)
            .map(|_| T::cast(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(vec![rows, cols], data)
    };
    match sched {
        NoiseSchedule::Ddpm(p) => NoiseDraw::Ddpm { t: rng.gen_range(1..=p.t_steps.max(1)), eps },
        NoiseSchedule::Edm(p) => NoiseDraw::Edm { sigma: p.sample_sigma(rng), eps },
    }
}

/// Wire the diffusion objective around any predictor graph builder. The
/// predictor receives the (preconditioned) noisy input node and the raw
/// noise scalar for the embedding, and must return the `[M, d]` prediction.
///
/// ddpm: mean‖ε̂ − ε‖²; edm: λ(σ)·mean‖D − z₀‖² with the standard
/// preconditioning around the inner network.
pub fn build_ldm_loss_with<T: Real, F>(
    g: &mut Graph<T>,
    sched: &NoiseSchedule,
    z0: &Tensor<T>,
    draw: &NoiseDraw<T>,
    predict: F,
) -> NodeId
where
    F: FnOnce(&mut Graph<T>, NodeId, f64) -> NodeId,
{
    match (sched, draw) {
        (NoiseSchedule::Ddpm(p), NoiseDraw::Ddpm { t, eps }) => {
            let tab = DdpmTables::new(p);
            let ab = tab.alpha_bar(*t);
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            let zt: Vec<T> = z0
                .data
                .iter()
                .zip(&eps.data)
                .map(|(&z, &e)| T::cast(s * z.dbl() + n * e.dbl()))
                .collect();
            let ztc = g.constant(&Tensor::new(z0.shape.clone(), zt));
            let eps_hat = predict(g, ztc, *t as f64);
            let epsc = g.constant(eps);
            let diff = g.sub(eps_hat, epsc);
            let sq = g.mul(diff, diff);
            g.mean_all(sq)
        }
        (NoiseSchedule::Edm(p), NoiseDraw::Edm { sigma, eps }) => {
            let x: Vec<T> = z0
                .data
                .iter()
                .zip(&eps.data)
                .map(|(&z, &e)| T::cast(z.dbl() + sigma * e.dbl()))
                .collect();
            let c_in = p.c_in(*sigma);
            let xin: Vec<T> = x.iter().map(|&v| T::cast(c_in * v.dbl())).collect();
            let xinc = g.constant(&Tensor::new(z0.shape.clone(), xin));
            let f = predict(g, xinc, p.c_noise(*sigma));
            let fscaled = g.scale(f, p.c_out(*sigma));
            let skip: Vec<T> = x.iter().map(|&v| T::cast(p.c_skip(*sigma) * v.dbl())).collect();
            let skipc = g.constant(&Tensor::new(z0.shape.clone(), skip));
            let d = g.add(fscaled, skipc);
            let z0c = g.constant(z0);
            let diff = g.sub(d, z0c);
            let sq = g.mul(diff, diff);
            let m = g.mean_all(sq);
            g.scale(m, p.loss_weight(*sigma))
        }
        _ => panic!("noise draw does not match schedule mode"),
    }
}

/// The objective with the transformer denoiser as predictor.
pub fn build_ldm_loss<T: Real>(
    g: &mut Graph<T>,
    ids: &BTreeMap<String, NodeId>,
    cfg: &DiTConfig,
    sched: &NoiseSchedule,
    z0: &Tensor<T>,
    draw: &NoiseDraw<T>,
    cond: Option<NodeId>,
) -> NodeId {
    build_ldm_loss_with(g, sched, z0, draw, |g, x, s| build_dit(g, ids, cfg, x, s, cond))
}

/// Single-item loss and gradients, conditioning built per `dm.cond_source`.
/// Non-finite losses are refused here so training can abort with context.
pub fn ldm_loss(
    store: &ParamStore<f32>,
    dm: &DmConfig,
    z0: &Tensor<f32>,
    spectrum: Option<&SpectrumCube>,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, GradMap<f32>), DiffusionError> {
    let mut g = Graph::<f32>::new();
    let ids = bind_params(&mut g, store, true);
    let cond = build_cond_node(&mut g, &ids, dm, spectrum)?;
    let draw = draw_noise::<f32>(&dm.schedule, z0.rows(), z0.cols(), rng);
    let loss = build_ldm_loss(&mut g, &ids, &dm.dit, &dm.schedule, z0, &draw, cond);
    let val = g.value(loss)[0] as f64;
    if !val.is_finite() {
        return Err(DiffusionError::NonFinite { loss: val });
    }
    g.backward(loss);
    Ok((val, collect_grads(&g, &ids)))
}

// ---------------------------------------------------------------------------
// Latent standardization and training data
// ---------------------------------------------------------------------------

/// Per-channel moments used to map autoencoder latents to unit scale before
/// diffusion and back afterwards. Stored in the autoencoder checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn from_ae_config(config: &serde_json::Value) -> Result<Self, DiffusionError> {
        let mean: Vec<f32> = serde_json::from_value(config["latent_mean"].clone())
            .map_err(|e| DiffusionError::MissingStats(format!("latent_mean: {e}")))?;
        let std: Vec<f32> = serde_json::from_value(config["latent_std"].clone())
            .map_err(|e| DiffusionError::MissingStats(format!("latent_std: {e}")))?;
        if mean.is_empty() || mean.len() != std.len() {
            return Err(DiffusionError::MissingStats(format!(
                "mean has {} channels, std has {}",
                mean.len(),
                std.len()
            )));
        }
        Ok(Self { mean, std })
    }

    fn map(&self, z: &Tensor<f32>, fwd: bool) -> Tensor<f32> {
        let d = self.mean.len();
        assert_eq!(z.cols(), d, "latent channels do not match the stats");
        let mut out = z.clone();
        for r in 0..z.rows() {
            for c in 0..d {
                let v = &mut out.data[r * d + c];
                let sd = self.std[c].max(1e-6);
                *v = if fwd { (*v - self.mean[c]) / sd } else { *v * sd + self.mean[c] };
            }
        }
        out
    }

    pub fn standardize(&self, z: &Tensor<f32>) -> Tensor<f32> {
        self.map(z, true)
    }

    pub fn destandardize(&self, z: &Tensor<f32>) -> Tensor<f32> {
        self.map(z, false)
    }
}

/// One diffusion training item: standardized latents plus the spectrum that
/// conditions them (None for unconditional toys).
#[derive(Debug, Clone)]
pub struct DmFrame {
    pub z0: Tensor<f32>,
    pub spectrum: Option<SpectrumCube>,
}

/// Encode every frame with the frozen autoencoder and standardize. The
/// sample seed stream only matters for sample-mode encoders.
pub fn prepare_dm_frames(
    ae_store: &ParamStore<f32>,
    ae_cfg: &AeConfig,
    stats: &LatentStats,
    norm: &NormalizeMap,
    frames: &[FrameData],
    seed: u64,
) -> Result<Vec<DmFrame>, DiffusionError> {
    frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let z = encode_cloud(ae_store, ae_cfg, norm, &f.lidar, seed ^ (i as u64))?;
            Ok(DmFrame { z0: stats.standardize(&z), spectrum: Some(f.spectrum.clone()) })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDmConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainDmConfig {
    pub fn desk_default() -> Self {
        Self { epochs: 100, batch: 16, lr: 1e-3, grad_clip: 1.0, seed: 7 }
    }

    /// Shorter schedule for warm-start fine-tuning.
    pub fn fine_tune_default() -> Self {
        Self { epochs: 20, ..Self::desk_default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DmStat {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct DmTrainReport {
    pub stats: Vec<DmStat>,
    pub epoch_loss: Vec<f64>,
    pub epoch_wall_s: Vec<f64>,
    pub digest: Option<String>,
}

impl DmTrainReport {
    /// Training curve as CSV (epoch, mean loss, wall seconds).
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss,wall_s\n");
        for (e, (l, w)) in self.epoch_loss.iter().zip(&self.epoch_wall_s).enumerate() {
            s.push_str(&format!("{e},{l},{w}\n"));
        }
        s
    }
}

const STREAM_DM_EPOCH: u64 = 1 << 21;
const STREAM_DM_ITEM: u64 = 1 << 42;

/// Train (or fine-tune, when `warm_start` is given) the latent diffusion
/// model. `parent_digest` should be the frozen autoencoder checkpoint digest;
/// it is embedded in the saved manifest so samplers can refuse a decoder the
/// latents were not produced by.
pub fn train_diffusion(
    dm: &DmConfig,
    tr: &TrainDmConfig,
    frames: &[DmFrame],
    parent_digest: Option<&str>,
    warm_start: Option<ParamStore<f32>>,
    out_base: Option<&Path>,
) -> Result<(ParamStore<f32>, DmTrainReport), DiffusionError> {
    dm.validate()?;
    if frames.is_empty() {
        return Err(DiffusionError::NoFrames);
    }
    let want = (dm.dit.m_latent, dm.dit.d_latent);
    for f in frames {
        let got = (f.z0.rows(), f.z0.cols());
        if got != want {
            return Err(DiffusionError::LatentShape { got, want });
        }
    }

    let mut store = match warm_start {
        Some(s) => {
            let fresh = init_dm_params(dm, &mut ChaCha12Rng::seed_from_u64(0));
            if s.names() != fresh.names() {
                return Err(DiffusionError::BadConfig(
                    "warm-start parameters do not match this config".into(),
                ));
            }
            s
        }
        None => init_dm_params(dm, &mut ChaCha12Rng::seed_from_u64(tr.seed)),
    };
    let mut adam = Adam::<f32>::new(tr.lr);
    let mut stats = Vec::new();
    let mut epoch_loss = Vec::with_capacity(tr.epochs);
    let mut epoch_wall_s = Vec::with_capacity(tr.epochs);
    let mut step = 0usize;

    for epoch in 0..tr.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut erng = ChaCha12Rng::seed_from_u64(tr.seed);
        erng.set_stream(STREAM_DM_EPOCH + epoch as u64);
        order.shuffle(&mut erng);

        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for chunk in order.chunks(tr.batch.max(1)) {
            let jobs: Vec<(usize, u64)> = chunk
                .iter()
                .enumerate()
                .map(|(slot, &fi)| (fi, STREAM_DM_ITEM + (step as u64) * 4096 + slot as u64))
                .collect();
            let results: Result<Vec<(f64, GradMap<f32>)>, DiffusionError> = jobs
                .par_iter()
                .map(|&(fi, stream)| {
                    let mut rng = ChaCha12Rng::seed_from_u64(tr.seed);
                    rng.set_stream(stream);
                    let f = &frames[fi];
                    ldm_loss(&store, dm, &f.z0, f.spectrum.as_ref(), &mut rng)
                })
                .collect();
            let results = match results {
                Ok(r) => r,
                Err(DiffusionError::NonFinite { loss }) => {
                    return Err(DiffusionError::Diverged { step, loss })
                }
                Err(e) => return Err(e),
            };

            let mut acc: GradMap<f32> = GradMap::new();
            for (_, gm) in &results {
                accumulate_grads(&mut acc, gm);
            }
            scale_grads(&mut acc, 1.0 / results.len() as f64);
            clip_global_norm(&mut acc, tr.grad_clip);
            adam.step(&mut store, &acc);

            let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
            epoch_sum += loss;
            epoch_n += 1;
            stats.push(DmStat { step, epoch, loss });
            step += 1;
        }
        epoch_loss.push(epoch_sum / epoch_n.max(1) as f64);
        epoch_wall_s.push(t0.elapsed().as_secs_f64());
    }

    let digest = match out_base {
        Some(base) => {
            let meta = CkptMeta {
                kind: "diffusion".into(),
                parent_digest: parent_digest.map(String::from),
                config: serde_json::json!({ "dm": dm, "train": tr }),
            };
            Some(save_checkpoint(base, &meta, &store)?)
        }
        None => None,
    };

    Ok((store, DmTrainReport { stats, epoch_loss, epoch_wall_s, digest }))
}

/// Recover the model config a diffusion checkpoint was trained with.
pub fn read_dm_config(meta: &CkptMeta) -> Result<DmConfig, DiffusionError> {
    serde_json::from_value(meta.config["dm"].clone())
        .map_err(|e| DiffusionError::BadConfig(format!("checkpoint dm config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PolarFov;

    fn tiny_dit() -> DiTConfig {
        DiTConfig {
            depth: 1,
            width: 16,
            heads: 2,
            m_latent: 3,
            d_latent: 2,
            d_cond: 5,
            cond: CondMode::CrossAttn,
        }
    }

    fn randomize_all(store: &mut ParamStore<f32>, rng: &mut ChaCha12Rng, limit: f64) {
        for name in store.names() {
            let shape = store.get(&name).shape.clone();
            *store.get_mut(&name) = uniform_init(rng, shape, limit);
        }
    }

    fn tiny_cube(seed: u64) -> SpectrumCube {
        let fov =
            PolarFov::new((0.0, 4.0), (-0.6, 0.6), (-0.2, 0.2), (8, 4, 2)).unwrap();
        let mut cube = SpectrumCube::zeros(fov);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for v in cube.data.iter_mut() {
            *v = rng.gen_range(0.0..3.0);
        }
        cube
    }

    fn tiny_renc() -> RadarEncConfig {
        RadarEncConfig {
            expect_dims: [8, 4, 2],
            upsample: (1, 2, 2),
            channels: [4, 5, 5],
            kernel: 3,
            bands: 2,
        }
    }

    // --- schedules ---

    #[test]
    fn ddpm_tables_ramp_and_destroy_signal() {
        let p = match NoiseSchedule::ddpm_default() {
            NoiseSchedule::Ddpm(p) => p,
            _ => unreachable!(),
        };
        let tab = DdpmTables::new(&p);
        assert_eq!(tab.t_max(), 100);
        assert!((tab.beta(1) - 1e-4).abs() < 1e-12);
        assert!((tab.beta(100) - 0.1).abs() < 1e-12);
        // β ramps linearly: constant first differences.
        let d0 = tab.beta(2) - tab.beta(1);
        for t in 2..100 {
            assert!((tab.beta(t + 1) - tab.beta(t) - d0).abs() < 1e-12);
        }
        // ᾱ strictly decreasing and effectively zero at T.
        for t in 2..=100 {
            assert!(tab.alpha_bar(t) < tab.alpha_bar(t - 1));
        }
        assert!(tab.alpha_bar(100) < 1e-2, "terminal alpha_bar {}", tab.alpha_bar(100));
        // Independent oracle: ᾱ_T = exp(Σ ln(1−β_t)).
        let log_sum: f64 = (1..=100).map(|t| (1.0 - tab.beta(t)).ln()).sum();
        assert!((tab.alpha_bar(100) - log_sum.exp()).abs() < 1e-12);
    }

    #[test]
    fn edm_grid_endpoints_spacing_and_degenerate() {
        let p = match NoiseSchedule::edm_default() {
            NoiseSchedule::Edm(p) => p,
            _ => unreachable!(),
        };
        let grid = p.sigma_grid();
        assert_eq!(grid.len(), 19);
        assert!((grid[0] - 80.0).abs() < 1e-9);
        assert!((grid[17] - 0.002).abs() < 1e-9);
        assert_eq!(grid[18], 0.0);
        for w in grid[..18].windows(2) {
            assert!(w[1] < w[0], "sigma grid must strictly decrease");
        }
        // ρ-spacing means σ^(1/ρ) is linear in the index: flat second
        // differences.
        let u: Vec<f64> = grid[..18].iter().map(|s| s.powf(1.0 / p.rho)).collect();
        for i in 0..16 {
            let dd = (u[i + 2] - u[i + 1]) - (u[i + 1] - u[i]);
            assert!(dd.abs() < 1e-9, "second difference {dd}");
        }
        let single = EdmParams { n_steps: 1, ..p };
        assert_eq!(single.sigma_grid(), vec![80.0, 0.0]);
    }

    #[test]
    fn edm_preconditioning_identities() {
        let p = EdmParams {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            n_steps: 18,
            sigma_data: 0.7,
            p_mean: -1.2,
            p_std: 1.2,
        };
        for &sigma in &[0.01, 0.3, 2.0, 60.0] {
            // Variance-preservation identity of the preconditioner.
            let lhs = p.c_skip(sigma).powi(2) * (sigma * sigma + p.sigma_data * p.sigma_data)
                + p.c_out(sigma).powi(2);
            assert!((lhs - p.sigma_data * p.sigma_data).abs() < 1e-9);
            // c_in normalizes the input variance of z_σ to 1.
            let vin = p.c_in(sigma).powi(2) * (sigma * sigma + p.sigma_data * p.sigma_data);
            assert!((vin - 1.0).abs() < 1e-9);
            assert!((p.loss_weight(sigma) * p.c_out(sigma).powi(2) - 1.0).abs() < 1e-9);
            assert!((p.c_noise(sigma) - sigma.ln() / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_serde_tags_roundtrip() {
        let d = NoiseSchedule::ddpm_default();
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["mode"], "ddpm");
        assert_eq!(serde_json::from_value::<NoiseSchedule>(v).unwrap(), d);
        let e = NoiseSchedule::edm_default();
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["mode"], "edm");
        assert_eq!(serde_json::from_value::<NoiseSchedule>(v).unwrap(), e);
        let cfg = DmConfig::desk_default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(serde_json::from_value::<DmConfig>(v).unwrap(), cfg);
    }

    // --- forward / reverse math ---

    #[test]
    fn forward_noise_matches_formula_and_limits() {
        // One-step schedule with β = 0.75 gives ᾱ = 0.25 exactly.
        let tab = DdpmTables::new(&DdpmParams { t_steps: 1, beta_min: 0.75, beta_max: 0.75 });
        let z0 = Tensor::new(vec![1, 1], vec![1.0f32]);
        let eps = Tensor::new(vec![1, 1], vec![0.5f32]);
        let zt = ddpm_forward_noise(&z0, 1, &eps, &tab).unwrap();
        let expect = 0.25f64.sqrt() * 1.0 + 0.75f64.sqrt() * 0.5;
        assert!((zt.data[0] as f64 - expect).abs() < 1e-6, "{} vs {expect}", zt.data[0]);
        assert!((expect - 0.9330127).abs() < 1e-6);

        // Vanishing β keeps the signal: z_1 ≈ z0.
        let tiny = DdpmTables::new(&DdpmParams { t_steps: 1, beta_min: 1e-12, beta_max: 1e-12 });
        let zt = ddpm_forward_noise(&z0, 1, &eps, &tiny).unwrap();
        assert!((zt.data[0] - 1.0).abs() < 1e-5);

        // σ-parameterized forward is a plain affine shift.
        let zs = edm_forward_noise(&z0, 2.5, &eps);
        assert!((zs.data[0] as f64 - (1.0 + 2.5 * 0.5)).abs() < 1e-6);

        // Out-of-range timesteps are refused.
        assert!(matches!(
            ddpm_forward_noise(&z0, 0, &eps, &tab),
            Err(DiffusionError::BadTimestep { .. })
        ));
        assert!(matches!(
            ddpm_forward_noise(&z0, 2, &eps, &tab),
            Err(DiffusionError::BadTimestep { .. })
        ));
    }

    #[test]
    fn forward_noise_marginals_monte_carlo() {
        let p = match NoiseSchedule::ddpm_default() {
            NoiseSchedule::Ddpm(p) => p,
            _ => unreachable!(),
        };
        let tab = DdpmTables::new(&p);
        let t = 40;
        let ab = tab.alpha_bar(t);
        let z0 = Tensor::new(vec![1, 1], vec![0.7f32]);
        let n = 100_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut sum = 0f64;
        let mut sumsq = 0f64;
        for _ in 0..n {
            let eps = standard_normal(1, 1, &mut rng);
            let zt = ddpm_forward_noise(&z0, t, &eps, &tab).unwrap();
            let v = zt.data[0] as f64;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want_mean = ab.sqrt() * 0.7;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(
            (mean - want_mean).abs() < 3.0 * se_mean,
            "mean {mean} vs {want_mean} (3se {})",
            3.0 * se_mean
        );
        assert!(
            (var - want_var).abs() < 3.0 * se_var,
            "var {var} vs {want_var} (3se {})",
            3.0 * se_var
        );
    }

    #[test]
    fn reverse_step_inverts_the_final_forward_step() {
        let p = match NoiseSchedule::ddpm_default() {
            NoiseSchedule::Ddpm(p) => p,
            _ => unreachable!(),
        };
        let tab = DdpmTables::new(&p);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z0 = standard_normal(4, 3, &mut rng);
        let eps = standard_normal(4, 3, &mut rng);
        let z1 = ddpm_forward_noise(&z0, 1, &eps, &tab).unwrap();
        // With the true ε as the prediction, the t=1 posterior mean is z0 and
        // no noise is added.
        let back = ddpm_reverse_step(&z1, 1, &eps, &tab, &mut rng).unwrap();
        for (a, b) in back.data.iter().zip(&z0.data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // t > 1 adds √β noise: two different rng states disagree.
        let z2 = ddpm_forward_noise(&z0, 2, &eps, &tab).unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(1);
        let mut r2 = ChaCha12Rng::seed_from_u64(2);
        let a = ddpm_reverse_step(&z2, 2, &eps, &tab, &mut r1).unwrap();
        let b = ddpm_reverse_step(&z2, 2, &eps, &tab, &mut r2).unwrap();
        assert!(a.data.iter().zip(&b.data).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    // --- Heun integrator ---

    #[test]
    fn heun_zero_denoiser_collapses_to_zero() {
        let p = EdmParams {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            n_steps: 18,
            sigma_data: 1.0,
            p_mean: -1.2,
            p_std: 1.2,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let noise = standard_normal(4, 2, &mut rng);
        let init = lincomb(80.0, &noise, 0.0, &noise);
        let zero = |x: &Tensor<f32>, _s: f64| Tensor::zeros(x.shape.clone());
        let out = edm_heun_integrate(&zero, &p.sigma_grid(), &init);
        // dx/dσ = x/σ keeps x proportional to σ, so σ → 0 lands exactly at 0.
        assert!(out.data.iter().all(|&v| v == 0.0), "{:?}", out.data);
    }

    #[test]
    fn heun_single_step_is_one_euler_step() {
        let target = Tensor::new(vec![2, 2], vec![0.3f32, -0.7, 1.2, 0.0]);
        let denoise = {
            let t = target.clone();
            move |_x: &Tensor<f32>, _s: f64| t.clone()
        };
        let grid = vec![5.0, 0.0];
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let init = standard_normal(2, 2, &mut rng);
        let out = edm_heun_integrate(&denoise, &grid, &init);
        // x + (0 − σ)(x − D)/σ = D: a single Euler step lands on the
        // denoiser output.
        for (o, t) in out.data.iter().zip(&target.data) {
            assert!((o - t).abs() < 1e-6);
        }
    }

    #[test]
    fn heun_matches_exponential_ode_solution() {
        // D(x, σ) = (1 − σ)x gives dx/dσ = x, so x(0) = x(σ0)·exp(−σ0).
        let p = EdmParams {
            sigma_min: 0.02,
            sigma_max: 2.0,
            rho: 7.0,
            n_steps: 100,
            sigma_data: 1.0,
            p_mean: -1.2,
            p_std: 1.2,
        };
        let denoise = |x: &Tensor<f32>, s: f64| lincomb(1.0 - s, x, 0.0, x);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let init = standard_normal(3, 2, &mut rng);
        let out = edm_heun_integrate(&denoise, &p.sigma_grid(), &init);
        let factor = (-2.0f64).exp();
        for (o, i) in out.data.iter().zip(&init.data) {
            let want = *i as f64 * factor;
            let rel = (*o as f64 - want).abs() / want.abs().max(1e-6);
            assert!(rel < 1e-3, "{o} vs {want} (rel {rel})");
        }
    }

    // --- denoiser ---

    #[test]
    fn dit_zero_init_is_the_zero_function() {
        let cfg = tiny_dit();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let store = init_dit_params(&cfg, &mut rng);
        let z = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng);
        let cond = standard_normal(7, cfg.d_cond, &mut rng);
        let out = dit_forward(&store, &cfg, &z, 13.0, Some(&cond));
        assert_eq!(out.shape, vec![cfg.m_latent, cfg.d_latent]);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dit_is_invariant_to_condition_token_order() {
        let cfg = tiny_dit();
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let mut store = init_dit_params(&cfg, &mut rng);
        randomize_all(&mut store, &mut rng, 0.4);
        let z = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng);
        let cond = standard_normal(6, cfg.d_cond, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pd = Vec::new();
        for &r in &perm {
            pd.extend_from_slice(&cond.data[r * cfg.d_cond..(r + 1) * cfg.d_cond]);
        }
        let cond_perm = Tensor::new(cond.shape.clone(), pd);
        let a = dit_forward(&store, &cfg, &z, 0.4, Some(&cond));
        let b = dit_forward(&store, &cfg, &z, 0.4, Some(&cond_perm));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn zeroed_cross_attention_equals_unconditional() {
        let cfg = tiny_dit();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut store = init_dit_params(&cfg, &mut rng);
        randomize_all(&mut store, &mut rng, 0.4);
        zero_cross_attention(&mut store);
        let z = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng);
        let cond_a = standard_normal(6, cfg.d_cond, &mut rng);
        let cond_b = standard_normal(9, cfg.d_cond, &mut rng);
        let ya = dit_forward(&store, &cfg, &z, 1.3, Some(&cond_a));
        let yb = dit_forward(&store, &cfg, &z, 1.3, Some(&cond_b));
        let yu = dit_forward(&store, &cfg, &z, 1.3, None);
        assert_eq!(ya.data, yb.data, "conditioned outputs must agree");
        assert_eq!(ya.data, yu.data, "conditioned must equal unconditional");
    }

    #[test]
    fn dit_gradient_check_depth_one() {
        let cfg = tiny_dit();
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let mut store = init_dit_params(&cfg, &mut rng);
        randomize_all(&mut store, &mut rng, 0.4);
        let store = store.map_to::<f64>();
        let z = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng).map_to::<f64>();
        let cond = standard_normal(4, cfg.d_cond, &mut rng).map_to::<f64>();
        let report = crate::nn::gradcheck::grad_check(
            &store,
            &|g, ids| {
                let zc = g.constant(&z);
                let cc = g.constant(&cond);
                let out = build_dit(g, ids, &cfg, zc, 0.7, Some(cc));
                let sq = g.mul(out, out);
                g.mean_all(sq)
            },
            1e-3,
            3,
            77,
        );
        assert!(
            report.passes(1e-4),
            "worst {} coord {}: fd {} vs analytic {} (rel {})",
            report.worst_param,
            report.worst_coord,
            report.fd,
            report.analytic,
            report.max_rel
        );
    }

    #[test]
    fn concat_token_conditioning_builds_and_responds_to_condition() {
        let cfg = DiTConfig { cond: CondMode::ConcatTokens, ..tiny_dit() };
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let mut store = init_dit_params(&cfg, &mut rng);
        randomize_all(&mut store, &mut rng, 0.4);
        let z = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng);
        let cond_a = standard_normal(6, cfg.d_cond, &mut rng);
        let cond_b = standard_normal(6, cfg.d_cond, &mut rng);
        let ya = dit_forward(&store, &cfg, &z, 0.2, Some(&cond_a));
        let yb = dit_forward(&store, &cfg, &z, 0.2, Some(&cond_b));
        assert_eq!(ya.shape, vec![cfg.m_latent, cfg.d_latent]);
        assert!(ya.data.iter().zip(&yb.data).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    // --- objective ---

    #[test]
    fn perfect_predictor_gives_zero_loss_both_modes() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let z0 = standard_normal(3, 2, &mut rng);

        let ddpm = NoiseSchedule::ddpm_default();
        let draw = draw_noise::<f32>(&ddpm, 3, 2, &mut rng);
        let eps = match &draw {
            NoiseDraw::Ddpm { eps, .. } => eps.clone(),
            _ => unreachable!(),
        };
        let mut g = Graph::<f32>::new();
        let loss = build_ldm_loss_with(&mut g, &ddpm, &z0, &draw, |g, _x, _s| g.constant(&eps));
        assert!(g.value(loss)[0].abs() < 1e-10);

        let edm = NoiseSchedule::edm_default();
        let draw = draw_noise::<f32>(&edm, 3, 2, &mut rng);
        let (sigma, eps) = match &draw {
            NoiseDraw::Edm { sigma, eps } => (*sigma, eps.clone()),
            _ => unreachable!(),
        };
        let p = match &edm {
            NoiseSchedule::Edm(p) => p.clone(),
            _ => unreachable!(),
        };
        // The network output that makes D equal z0 exactly.
        let x = edm_forward_noise(&z0, sigma, &eps);
        let fstar = lincomb(1.0 / p.c_out(sigma), &z0, -p.c_skip(sigma) / p.c_out(sigma), &x);
        let mut g = Graph::<f32>::new();
        let loss = build_ldm_loss_with(&mut g, &edm, &z0, &draw, |g, _x, _s| g.constant(&fstar));
        assert!(g.value(loss)[0].abs() < 1e-8, "loss {}", g.value(loss)[0]);
    }

    #[test]
    fn zero_network_loss_equals_closed_form() {
        // At init the denoiser is the zero function, so the ddpm loss must be
        // exactly mean(ε²) and the edm loss λ·mean((c_skip·z_σ − z0)²).
        let cfg = tiny_dit();
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let store = init_dit_params(&cfg, &mut rng);
        let z0 = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng);

        let ddpm = NoiseSchedule::ddpm_default();
        let draw = draw_noise::<f32>(&ddpm, cfg.m_latent, cfg.d_latent, &mut rng);
        let eps = match &draw {
            NoiseDraw::Ddpm { eps, .. } => eps.clone(),
            _ => unreachable!(),
        };
        let mut g = Graph::<f32>::new();
        let ids = bind_params(&mut g, &store, false);
        let loss = build_ldm_loss(&mut g, &ids, &cfg, &ddpm, &z0, &draw, None);
        let want: f64 =
            eps.data.iter().map(|&e| (e as f64) * (e as f64)).sum::<f64>() / eps.len() as f64;
        assert!((g.value(loss)[0] as f64 - want).abs() < 1e-6);

        let edm = NoiseSchedule::edm_default();
        let draw = draw_noise::<f32>(&edm, cfg.m_latent, cfg.d_latent, &mut rng);
        let (sigma, eps) = match &draw {
            NoiseDraw::Edm { sigma, eps } => (*sigma, eps.clone()),
            _ => unreachable!(),
        };
        let p = match &edm {
            NoiseSchedule::Edm(p) => p.clone(),
            _ => unreachable!(),
        };
        let mut g = Graph::<f32>::new();
        let ids = bind_params(&mut g, &store, false);
        let loss = build_ldm_loss(&mut g, &ids, &cfg, &edm, &z0, &draw, None);
        let x = edm_forward_noise(&z0, sigma, &eps);
        let want: f64 = x
            .data
            .iter()
            .zip(&z0.data)
            .map(|(&xv, &zv)| {
                let d = p.c_skip(sigma) * xv as f64 - zv as f64;
                d * d
            })
            .sum::<f64>()
            / x.len() as f64
            * p.loss_weight(sigma);
        let got = g.value(loss)[0] as f64;
        assert!((got - want).abs() / want.max(1e-9) < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn ldm_loss_gradient_check_edm_mode() {
        let cfg = tiny_dit();
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let mut store = init_dit_params(&cfg, &mut rng);
        randomize_all(&mut store, &mut rng, 0.4);
        let store = store.map_to::<f64>();
        let z0 = standard_normal(cfg.m_latent, cfg.d_latent, &mut rng).map_to::<f64>();
        let cond = standard_normal(4, cfg.d_cond, &mut rng).map_to::<f64>();
        let edm = NoiseSchedule::edm_default();
        let draw = draw_noise::<f64>(&edm, cfg.m_latent, cfg.d_latent, &mut rng);
        let report = crate::nn::gradcheck::grad_check(
            &store,
            &|g, ids| {
                let cc = g.constant(&cond);
                build_ldm_loss(g, ids, &cfg, &edm, &z0, &draw, Some(cc))
            },
            1e-3,
            3,
            78,
        );
        assert!(
            report.passes(1e-4),
            "worst {} coord {}: fd {} vs analytic {} (rel {})",
            report.worst_param,
            report.worst_coord,
            report.fd,
            report.analytic,
            report.max_rel
        );
    }

    // --- radar conditioning ---

    #[test]
    fn radar_tokens_count_and_zero_cube_degeneracy() {
        let cfg = tiny_renc();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let mut store = init_radar_enc_params(&cfg, &mut rng);
        let dims = cfg.out_dims();
        // Range is halved three times (8 → 4 → 2 → 1); angles are preserved
        // at their upsampled sizes.
        assert_eq!(dims, [1, 8, 4]);

        // Zero spectrum and zeroed position projection: every token is the
        // same bias-driven constant.
        for nm in ["renc.pos.w", "renc.pos.b"] {
            store.get_mut(nm).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let cube = SpectrumCube::zeros(
            PolarFov::new((0.0, 4.0), (-0.6, 0.6), (-0.2, 0.2), (8, 4, 2)).unwrap(),
        );
        let toks = encode_radar(&store, &cfg, &cube).unwrap();
        assert_eq!(toks.tokens.rows(), dims.iter().product::<usize>());
        assert_eq!(toks.tokens.cols(), cfg.channels[2]);
        let first: Vec<f32> = toks.tokens.data[..cfg.channels[2]].to_vec();
        for r in 1..toks.tokens.rows() {
            for c in 0..cfg.channels[2] {
                assert_eq!(
                    toks.tokens.data[r * cfg.channels[2] + c],
                    first[c],
                    "token {r} differs without position features"
                );
            }
        }

        // With position features back, tokens must differ across cells.
        let store2 = init_radar_enc_params(&cfg, &mut ChaCha12Rng::seed_from_u64(41));
        let toks2 = encode_radar(&store2, &cfg, &cube).unwrap();
        let row0 = &toks2.tokens.data[..cfg.channels[2]];
        let row1 = &toks2.tokens.data[cfg.channels[2]..2 * cfg.channels[2]];
        assert!(row0.iter().zip(row1).any(|(a, b)| (a - b).abs() > 1e-7));

        // Dim mismatch is refused.
        let bad = SpectrumCube::zeros(
            PolarFov::new((0.0, 4.0), (-0.6, 0.6), (-0.2, 0.2), (4, 4, 2)).unwrap(),
        );
        assert!(matches!(
            encode_radar(&store2, &cfg, &bad),
            Err(DiffusionError::CubeDims { .. })
        ));
    }

    #[test]
    fn radar_encoder_gradient_check() {
        let cfg = tiny_renc();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let store = init_radar_enc_params(&cfg, &mut rng).map_to::<f64>();
        let cube = tiny_cube(43);
        let report = crate::nn::gradcheck::grad_check(
            &store,
            &|g, ids| {
                let toks = build_radar_encoder(g, ids, &cfg, &cube).unwrap();
                let sq = g.mul(toks, toks);
                g.mean_all(sq)
            },
            1e-3,
            3,
            79,
        );
        assert!(
            report.passes(1e-4),
            "worst {} coord {}: fd {} vs analytic {} (rel {})",
            report.worst_param,
            report.worst_coord,
            report.fd,
            report.analytic,
            report.max_rel
        );
    }

    #[test]
    fn raw_conditioner_has_one_token_per_upsampled_cell() {
        let cfg = tiny_renc();
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let store = init_raw_cond_params(&cfg, 5, &mut rng);
        let cube = tiny_cube(45);
        let toks = raw_condition_tokens(&store, &cfg, &cube).unwrap();
        assert_eq!(toks.grid_dims, [8, 8, 4]);
        assert_eq!(toks.tokens.rows(), 8 * 8 * 4);
        assert_eq!(toks.tokens.cols(), 5);
        assert!(toks.tokens.data.iter().all(|v| v.is_finite()));
    }

    // --- latent stats ---

    #[test]
    fn latent_stats_roundtrip_and_parse_errors() {
        let stats = LatentStats { mean: vec![0.5, -1.0], std: vec![2.0, 0.25] };
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let z = standard_normal(4, 2, &mut rng);
        let s = stats.standardize(&z);
        let back = stats.destandardize(&s);
        for (a, b) in back.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-6);
        }
        // Standardizing shifts each channel by its stats.
        assert!((s.data[0] - (z.data[0] - 0.5) / 2.0).abs() < 1e-6);

        let good = serde_json::json!({ "latent_mean": [0.0], "latent_std": [1.0] });
        assert!(LatentStats::from_ae_config(&good).is_ok());
        let missing = serde_json::json!({ "latent_mean": [0.0] });
        assert!(matches!(
            LatentStats::from_ae_config(&missing),
            Err(DiffusionError::MissingStats(_))
        ));
        let mismatched = serde_json::json!({ "latent_mean": [0.0], "latent_std": [1.0, 2.0] });
        assert!(matches!(
            LatentStats::from_ae_config(&mismatched),
            Err(DiffusionError::MissingStats(_))
        ));
    }

    // --- training ---

    fn toy_frames(n: usize, m: usize, d: usize, seed: u64) -> Vec<DmFrame> {
        // Two-component mixture: all tokens at +1 or all at −1, small jitter.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0f32 } else { -1.0 };
                let data = (0..m * d)
                    .map(|_| sign + 0.05 * rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                DmFrame { z0: Tensor::new(vec![m, d], data), spectrum: None }
            })
            .collect()
    }

    fn toy_dm(schedule: NoiseSchedule) -> DmConfig {
        DmConfig {
            dit: DiTConfig {
                depth: 1,
                width: 16,
                heads: 2,
                m_latent: 2,
                d_latent: 1,
                d_cond: 4,
                cond: CondMode::CrossAttn,
            },
            renc: tiny_renc(),
            cond_source: CondSource::Unconditional,
            schedule,
        }
    }

    #[test]
    fn training_loss_drops_within_five_epochs_and_is_deterministic() {
        let dm = toy_dm(NoiseSchedule::ddpm_default());
        let tr = TrainDmConfig { epochs: 5, batch: 8, lr: 3e-3, grad_clip: 1.0, seed: 2 };
        let frames = toy_frames(32, 2, 1, 7);
        let (_, rep) = train_diffusion(&dm, &tr, &frames, None, None, None).unwrap();
        assert_eq!(rep.epoch_loss.len(), 5);
        assert!(
            rep.epoch_loss[4] < rep.epoch_loss[0],
            "epoch loss did not drop: {:?}",
            rep.epoch_loss
        );
        let (_, rep2) = train_diffusion(&dm, &tr, &frames, None, None, None).unwrap();
        assert_eq!(rep.epoch_loss, rep2.epoch_loss, "training must be deterministic");
        // Curve CSV covers every epoch.
        let csv = rep.curve_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("epoch,loss,wall_s"));
    }

    #[test]
    fn fine_tune_resumes_close_to_donor_loss() {
        let dm = toy_dm(NoiseSchedule::ddpm_default());
        let frames = toy_frames(32, 2, 1, 8);
        let tr = TrainDmConfig { epochs: 12, batch: 8, lr: 3e-3, grad_clip: 1.0, seed: 3 };
        let (params, donor) = train_diffusion(&dm, &tr, &frames, None, None, None).unwrap();
        let donor_final = *donor.epoch_loss.last().unwrap();

        let ft = TrainDmConfig { epochs: 1, ..tr };
        let (_, resumed) =
            train_diffusion(&dm, &ft, &frames, None, Some(params), None).unwrap();
        let first = resumed.epoch_loss[0];
        let rel = (first - donor_final).abs() / donor_final;
        assert!(rel < 0.10, "fine-tune first epoch {first} vs donor final {donor_final} (rel {rel})");

        // A fresh model's first epoch sits far above the donor's final loss.
        let (_, fresh) = train_diffusion(&dm, &ft, &frames, None, None, None).unwrap();
        assert!(fresh.epoch_loss[0] > donor_final * 1.5);
    }

    #[test]
    fn warm_start_with_wrong_parameters_is_refused() {
        let dm = toy_dm(NoiseSchedule::ddpm_default());
        let frames = toy_frames(4, 2, 1, 9);
        let tr = TrainDmConfig { epochs: 1, batch: 4, lr: 1e-3, grad_clip: 1.0, seed: 4 };
        let other = DmConfig { dit: DiTConfig { depth: 2, ..dm.dit.clone() }, ..dm.clone() };
        let donor = init_dm_params(&other, &mut ChaCha12Rng::seed_from_u64(0));
        let err = train_diffusion(&dm, &tr, &frames, None, Some(donor), None).unwrap_err();
        assert!(matches!(err, DiffusionError::BadConfig(_)));
    }

    #[test]
    fn diverging_run_aborts_with_context() {
        let dm = toy_dm(NoiseSchedule::ddpm_default());
        let frames = toy_frames(16, 2, 1, 10);
        let tr = TrainDmConfig { epochs: 4, batch: 4, lr: 1e30, grad_clip: f64::INFINITY, seed: 5 };
        match train_diffusion(&dm, &tr, &frames, None, None, None) {
            Err(DiffusionError::Diverged { .. }) => {}
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn latent_shape_mismatch_is_refused() {
        let dm = toy_dm(NoiseSchedule::ddpm_default());
        let frames = toy_frames(4, 3, 1, 11);
        let tr = TrainDmConfig { epochs: 1, batch: 4, lr: 1e-3, grad_clip: 1.0, seed: 6 };
        assert!(matches!(
            train_diffusion(&dm, &tr, &frames, None, None, None),
            Err(DiffusionError::LatentShape { .. })
        ));
        assert!(matches!(
            train_diffusion(&dm, &tr, &[], None, None, None),
            Err(DiffusionError::NoFrames)
        ));
    }

    #[test]
    fn conditioned_training_updates_the_radar_encoder() {
        let renc = tiny_renc();
        let dm = DmConfig {
            dit: DiTConfig {
                depth: 1,
                width: 16,
                heads: 2,
                m_latent: 2,
                d_latent: 1,
                d_cond: renc.channels[2],
                cond: CondMode::CrossAttn,
            },
            renc,
            cond_source: CondSource::RadarEncoder,
            schedule: NoiseSchedule::ddpm_default(),
        };
        let mut frames = toy_frames(6, 2, 1, 12);
        for (i, f) in frames.iter_mut().enumerate() {
            f.spectrum = Some(tiny_cube(100 + i as u64));
        }
        let tr = TrainDmConfig { epochs: 2, batch: 3, lr: 1e-3, grad_clip: 1.0, seed: 7 };
        let before = init_dm_params(&dm, &mut ChaCha12Rng::seed_from_u64(tr.seed));
        let (after, rep) = train_diffusion(&dm, &tr, &frames, None, None, None).unwrap();
        assert!(rep.epoch_loss.iter().all(|l| l.is_finite()));
        let moved = before
            .get("renc.c0.w")
            .data
            .iter()
            .zip(&after.get("renc.c0.w").data)
            .any(|(a, b)| (a - b).abs() > 1e-9);
        assert!(moved, "conditioning gradients must reach the spectrum encoder");

        // Missing spectra are an error for conditioned training.
        let bare = toy_frames(2, 2, 1, 13);
        assert!(matches!(
            train_diffusion(&dm, &tr, &bare, None, None, None),
            Err(DiffusionError::MissingSpectrum)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_config_and_parent() {
        let dir = tempfile::tempdir().unwrap();
        let dm = toy_dm(NoiseSchedule::edm_default());
        let frames = toy_frames(8, 2, 1, 14);
        let tr = TrainDmConfig { epochs: 1, batch: 4, lr: 1e-3, grad_clip: 1.0, seed: 8 };
        let base = dir.path().join("dm");
        let parent = "a".repeat(64);
        let (params, rep) =
            train_diffusion(&dm, &tr, &frames, Some(&parent), None, Some(&base)).unwrap();
        let digest = rep.digest.clone().unwrap();

        let (meta, loaded, got_digest) =
            crate::nn::ckpt::load_checkpoint_expecting_parent(&base, &parent).unwrap();
        assert_eq!(got_digest, digest);
        assert_eq!(meta.kind, "diffusion");
        assert_eq!(read_dm_config(&meta).unwrap(), dm);
        for name in params.names() {
            assert_eq!(params.get(&name).data, loaded.get(&name).data, "{name}");
        }
        assert!(crate::nn::ckpt::load_checkpoint_expecting_parent(&base, &"b".repeat(64))
            .is_err());
    }

    // --- end-to-end toy distributions (slower) ---

    #[test]
    fn ancestral_sampling_recovers_both_modes_of_a_toy_mixture() {
        let dm = toy_dm(NoiseSchedule::ddpm_default());
        let frames = toy_frames(256, 2, 1, 15);
        let tr = TrainDmConfig { epochs: 60, batch: 16, lr: 5e-3, grad_clip: 1.0, seed: 9 };
        let (params, rep) = train_diffusion(&dm, &tr, &frames, None, None, None).unwrap();
        assert!(
            rep.epoch_loss.last().unwrap() < &0.5,
            "toy training should fit well, got {:?}",
            rep.epoch_loss.last()
        );

        let n = 1000;
        let samples: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha12Rng::seed_from_u64(9000 + i as u64);
                let z = ddpm_sample(&params, &dm, None, &mut rng).unwrap();
                (z.data[0] as f64 + z.data[1] as f64) / 2.0
            })
            .collect();
        let positive = samples.iter().filter(|&&m| m > 0.0).count() as f64 / n as f64;
        assert!(
            (positive - 0.5).abs() <= 0.10,
            "mode balance off: {positive} positive fraction"
        );
        // Samples must actually sit at the modes, not just split by sign:
        // an untrained prior would leave most mass near 0.
        let near_modes =
            samples.iter().filter(|&&m| (m.abs() - 1.0).abs() <= 0.3).count() as f64 / n as f64;
        assert!(near_modes >= 0.7, "only {near_modes} of samples near ±1");
    }

    #[test]
    fn heun_sampling_recovers_the_mean_of_a_toy_mixture() {
        // Asymmetric mixture in 2 channels: 70% at (+1,+1), 30% at (−1,−1),
        // so the target mean is (0.4, 0.4).
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let frames: Vec<DmFrame> = (0..256)
            .map(|_| {
                let sign = if rng.gen_bool(0.7) { 1.0f32 } else { -1.0 };
                let data = (0..2)
                    .map(|_| sign + 0.1 * rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                DmFrame { z0: Tensor::new(vec![1, 2], data), spectrum: None }
            })
            .collect();
        let n_data = (frames.len() * 2) as f64;
        let sum: f64 = frames.iter().flat_map(|f| &f.z0.data).map(|&v| v as f64).sum();
        let sumsq: f64 =
            frames.iter().flat_map(|f| &f.z0.data).map(|&v| (v as f64).powi(2)).sum();
        let data_mean = sum / n_data;
        let sigma_data = (sumsq / n_data - data_mean * data_mean).sqrt();
        let dm = DmConfig {
            dit: DiTConfig {
                depth: 1,
                width: 32,
                heads: 4,
                m_latent: 1,
                d_latent: 2,
                d_cond: 4,
                cond: CondMode::CrossAttn,
            },
            renc: tiny_renc(),
            cond_source: CondSource::Unconditional,
            // Noise draws centered at σ ≈ 1, where the two basins separate
            // (the modes sit ~2.8σ_noise apart there).
            schedule: NoiseSchedule::Edm(EdmParams {
                sigma_data,
                p_mean: 0.0,
                ..match NoiseSchedule::edm_default() {
                    NoiseSchedule::Edm(p) => p,
                    _ => unreachable!(),
                }
            }),
        };
        let tr = TrainDmConfig { epochs: 100, batch: 16, lr: 5e-3, grad_clip: 1.0, seed: 10 };
        let (params, _) = train_diffusion(&dm, &tr, &frames, None, None, None).unwrap();

        // The sampler models the training set, so its empirical mean (an
        // estimate of the true (0.4, 0.4)) is the reference.
        let n = 1000;
        let sums: (f64, f64) = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha12Rng::seed_from_u64(20_000 + i as u64);
                let z = edm_heun_sample(&params, &dm, None, &mut rng).unwrap();
                (z.data[0] as f64, z.data[1] as f64)
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let mean = (sums.0 / n as f64, sums.1 / n as f64);
        assert!((data_mean - 0.4).abs() < 0.1, "toy draw skewed: {data_mean}");
        let err = ((mean.0 - data_mean).powi(2) + (mean.1 - data_mean).powi(2)).sqrt();
        assert!(err < 0.1, "sample mean {mean:?} vs data mean {data_mean}, err {err}");
    }

    #[test]
    fn heun_sampler_is_deterministic_per_seed_and_checks_schedule() {
        let dm = toy_dm(NoiseSchedule::edm_default());
        let params = init_dm_params(&dm, &mut ChaCha12Rng::seed_from_u64(17));
        let mut r1 = ChaCha12Rng::seed_from_u64(42);
        let mut r2 = ChaCha12Rng::seed_from_u64(42);
        let a = edm_heun_sample(&params, &dm, None, &mut r1).unwrap();
        let b = edm_heun_sample(&params, &dm, None, &mut r2).unwrap();
        assert_eq!(a.data, b.data);

        let mut r3 = ChaCha12Rng::seed_from_u64(43);
        let c = edm_heun_sample(&params, &dm, None, &mut r3).unwrap();
        assert!(a.data.iter().zip(&c.data).any(|(x, y)| x != y));

        // Mode mismatch errors both ways.
        assert!(matches!(
            ddpm_sample(&params, &dm, None, &mut r1),
            Err(DiffusionError::ScheduleMode { .. })
        ));
        let ddpm = toy_dm(NoiseSchedule::ddpm_default());
        let p2 = init_dm_params(&ddpm, &mut ChaCha12Rng::seed_from_u64(18));
        assert!(matches!(
            edm_heun_sample(&p2, &ddpm, None, &mut r1),
            Err(DiffusionError::ScheduleMode { .. })
        ));
    }
}
