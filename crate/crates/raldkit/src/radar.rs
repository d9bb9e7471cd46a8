//! Radar spectrum simulation, OS-CFAR detection, and spectrum utilities.
//!
//! The simulated sensor reports a power spectrum over a coarse polar grid:
//! each scene point splats an anisotropic Gaussian point-spread function
//! (wider in the angular axes than in range, mirroring the poor angular
//! resolution of real radar), and every bin then gains an independent
//! exponential noise term for the speckle floor.
//!
//! OS-CFAR thresholds each cell against the k-th smallest value in a hollow
//! reference window. For exponential noise the false-alarm rate of that rule
//! has a closed form, so the threshold factor can be calibrated exactly
//! rather than tuned.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{polar_to_cart, FrustumIndex, PointCloud, PolarFov};

#[derive(Debug, Error)]
pub enum RadarError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("blob is {found} bytes, sidecar implies {expect}")]
    SizeMismatch { expect: usize, found: usize },
    #[error("unsupported spectrum format version {0}")]
    Version(u32),
    #[error("invalid CFAR config: {0}")]
    BadCfar(String),
    #[error("invalid upsampling factor: {0}")]
    BadFactor(String),
}

/// Dense power spectrum over a polar grid, row-major `[r, az, el]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumCube {
    pub fov: PolarFov,
    pub data: Vec<f32>,
}

impl SpectrumCube {
    pub fn zeros(fov: PolarFov) -> Self {
        let n = fov.cell_count();
        Self { fov, data: vec![0.0; n] }
    }

    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.fov.n_az + j) * self.fov.n_el + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.flat(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let f = self.flat(i, j, k);
        self.data[f] = v;
    }
}

/// Point-spread and noise parameters for the spectrum simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumParams {
    /// Gaussian PSF standard deviations in bin units (range, azimuth,
    /// elevation). Angular sigmas should exceed the range sigma.
    pub psf_sigma_bins: [f64; 3],
    /// Mean of the exponential speckle noise added to every bin.
    pub noise_mean: f64,
    /// Peak power a unit-reflectivity point contributes at its own bin.
    pub amplitude: f64,
}

impl Default for SpectrumParams {
    fn default() -> Self {
        Self {
            psf_sigma_bins: [0.6, 1.2, 1.2],
            noise_mean: 1.0,
            amplitude: 40.0, // 16 dB over a unit noise floor
        }
    }
}

/// Render a point cloud into a radar power spectrum.
///
/// Per-point reflectivities default to 1; pass `amps` to weight them. Points
/// outside the FOV contribute nothing.
pub fn simulate_spectrum(
    fov: &PolarFov,
    pc: &PointCloud,
    amps: Option<&[f64]>,
    params: &SpectrumParams,
    rng: &mut ChaCha12Rng,
) -> SpectrumCube {
    if let Some(a) = amps {
        assert_eq!(a.len(), pc.len(), "one amplitude per point");
    }
    let mut cube = SpectrumCube::zeros(fov.clone());
    let (nr, na, ne) = (fov.n_r, fov.n_az, fov.n_el);

    // Accumulate reflectivity at bin resolution first, then blur once:
    // equivalent to splatting each point and much cheaper for dense clouds.
    let mut reflect = vec![0f64; cube.data.len()];
    for (pi, &p) in pc.points.iter().enumerate() {
        if let Some(idx) = crate::geom::frustum_index(fov, p) {
            let a = amps.map_or(1.0, |v| v[pi]);
            reflect[(idx.i * na + idx.j) * ne + idx.k] += a * params.amplitude;
        }
    }

    // Separable truncated Gaussian blur, peak-normalized per axis so an
    // isolated unit splat keeps its peak power.
    let axis_kernel = |sigma: f64| -> Vec<f64> {
        if sigma <= 0.0 {
            return vec![1.0];
        }
        let half = (3.0 * sigma).ceil() as i64;
        (-half..=half)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect()
    };
    let blur_axis = |buf: &mut Vec<f64>, axis: usize, sigma: f64| {
        let kernel = axis_kernel(sigma);
        if kernel.len() == 1 {
            return;
        }
        let half = (kernel.len() / 2) as i64;
        let dims = [nr, na, ne];
        let n_axis = dims[axis] as i64;
        let mut out = vec![0f64; buf.len()];
        for i in 0..nr {
            for j in 0..na {
                for k in 0..ne {
                    let src = [i as i64, j as i64, k as i64];
                    let v = buf[(i * na + j) * ne + k];
                    if v == 0.0 {
                        continue;
                    }
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let mut dst = src;
                        dst[axis] += ki as i64 - half;
                        if dst[axis] < 0 || dst[axis] >= n_axis {
                            continue;
                        }
                        out[((dst[0] as usize) * na + dst[1] as usize) * ne + dst[2] as usize] +=
                            v * kv;
                    }
                }
            }
        }
        *buf = out;
    };
    blur_axis(&mut reflect, 0, params.psf_sigma_bins[0]);
    blur_axis(&mut reflect, 1, params.psf_sigma_bins[1]);
    blur_axis(&mut reflect, 2, params.psf_sigma_bins[2]);

    let exp = Exp::new(1.0 / params.noise_mean.max(f64::MIN_POSITIVE)).expect("positive rate");
    for (o, &r) in cube.data.iter_mut().zip(&reflect) {
        let noise = if params.noise_mean > 0.0 { exp.sample(rng) } else { 0.0 };
        *o = (r + noise) as f32;
    }
    cube
}

/// OS-CFAR detector configuration.
///
/// `window` and `guard` are per-axis half-widths of the reference and guard
/// boxes; reference cells are those inside the window box but outside the
/// guard box. `k` ranks the reference cells (1 = smallest) at full window
/// occupancy; near edges the window clamps and the rank rescales
/// proportionally. `alpha` scales the ranked value into the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfarConfig {
    pub window: [usize; 3],
    pub guard: [usize; 3],
    pub k: usize,
    pub alpha: f64,
}

impl CfarConfig {
    /// Reference-cell count of a fully interior window.
    pub fn full_reference_count(&self) -> usize {
        let vol = |h: [usize; 3]| (2 * h[0] + 1) * (2 * h[1] + 1) * (2 * h[2] + 1);
        vol(self.window) - vol(self.guard)
    }

    pub fn validate(&self) -> Result<(), RadarError> {
        for a in 0..3 {
            if self.window[a] < self.guard[a] {
                return Err(RadarError::BadCfar(format!(
                    "window half-width {} < guard half-width {} on axis {a}",
                    self.window[a], self.guard[a]
                )));
            }
        }
        let n = self.full_reference_count();
        if n == 0 {
            return Err(RadarError::BadCfar("window equals guard: no reference cells".into()));
        }
        if self.k == 0 || self.k > n {
            return Err(RadarError::BadCfar(format!("rank k={} outside 1..={n}", self.k)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(RadarError::BadCfar(format!("alpha={} must be positive", self.alpha)));
        }
        Ok(())
    }
}

/// One CFAR detection: the cell, its power, and the threshold it beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub idx: FrustumIndex,
    pub value: f64,
    pub threshold: f64,
}

/// k-th smallest (1-based) by partial selection; values are consumed.
fn kth_smallest(values: &mut Vec<f64>, k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= values.len());
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
    *kth
}

/// Ordered-statistic CFAR over the full cube.
///
/// Returns detections in layout order (range slowest). A cell detects when
/// its power strictly exceeds `alpha` times the ranked reference value.
pub fn os_cfar(cube: &SpectrumCube, cfg: &CfarConfig) -> Result<Vec<Detection>, RadarError> {
    cfg.validate()?;
    let (nr, na, ne) = (cube.fov.n_r, cube.fov.n_az, cube.fov.n_el);
    let n_full = cfg.full_reference_count();
    let mut detections = Vec::new();
    let mut reference = Vec::with_capacity(n_full);
    for ci in 0..nr {
        for cj in 0..na {
            for ck in 0..ne {
                reference.clear();
                // Clamped hollow window around the cell under test.
                let lo = |c: usize, h: usize| c.saturating_sub(h);
                let hi = |c: usize, h: usize, n: usize| (c + h).min(n - 1);
                for i in lo(ci, cfg.window[0])..=hi(ci, cfg.window[0], nr) {
                    let in_g0 = i.abs_diff(ci) <= cfg.guard[0];
                    for j in lo(cj, cfg.window[1])..=hi(cj, cfg.window[1], na) {
                        let in_g1 = in_g0 && j.abs_diff(cj) <= cfg.guard[1];
                        for k in lo(ck, cfg.window[2])..=hi(ck, cfg.window[2], ne) {
                            if in_g1 && k.abs_diff(ck) <= cfg.guard[2] {
                                continue;
                            }
                            reference.push(cube.get(i, j, k) as f64);
                        }
                    }
                }
                if reference.is_empty() {
                    continue; // window degenerate on a tiny cube: no basis to detect
                }
                let n_avail = reference.len();
                let k_eff = if n_avail == n_full {
                    cfg.k
                } else {
                    (((cfg.k * n_avail) as f64 / n_full as f64).round() as usize).clamp(1, n_avail)
                };
                let ranked = kth_smallest(&mut reference, k_eff);
                let threshold = cfg.alpha * ranked;
                let value = cube.get(ci, cj, ck) as f64;
                if value > threshold {
                    detections.push(Detection {
                        idx: FrustumIndex::new(ci, cj, ck),
                        value,
                        threshold,
                    });
                }
            }
        }
    }
    Ok(detections)
}

/// Exact false-alarm probability of OS-CFAR on iid exponential noise:
/// the product of i / (i + alpha) for i in N-k+1 ..= N, where N is the
/// reference-cell count and k the rank.
pub fn os_cfar_pfa(alpha: f64, n_ref: usize, k: usize) -> f64 {
    assert!(k >= 1 && k <= n_ref, "rank k={k} outside 1..={n_ref}");
    assert!(alpha >= 0.0);
    let mut p = 1.0;
    for i in (n_ref - k + 1)..=n_ref {
        p *= i as f64 / (i as f64 + alpha);
    }
    p
}

/// Solve `os_cfar_pfa(alpha, n, k) == p_fa` for alpha by bisection.
pub fn calibrate_alpha(p_fa: f64, n_ref: usize, k: usize) -> Result<f64, RadarError> {
    if !(p_fa > 0.0 && p_fa < 1.0) {
        return Err(RadarError::BadCfar(format!("target p_fa={p_fa} outside (0, 1)")));
    }
    if k == 0 || k > n_ref {
        return Err(RadarError::BadCfar(format!("rank k={k} outside 1..={n_ref}")));
    }
    // P_fa is strictly decreasing in alpha from 1 at alpha=0 toward 0.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while os_cfar_pfa(hi, n_ref, k) > p_fa {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(RadarError::BadCfar("alpha calibration diverged".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if os_cfar_pfa(mid, n_ref, k) > p_fa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Detections to Cartesian points at their bin centers.
pub fn cfar_to_points(fov: &PolarFov, detections: &[Detection]) -> PointCloud {
    let points = detections
        .iter()
        .map(|d| {
            let (r, az, el) = fov.cell_center(d.idx);
            polar_to_cart(r, az, el)
        })
        .collect();
    PointCloud::new(points)
}

/// Upsample a spectrum by integer factors per axis using separable linear
/// interpolation in index space: output sample `j` reads input position
/// `j / f`, clamped at the top edge. Factor 1 leaves an axis untouched.
pub fn upsample_spectrum(cube: &SpectrumCube, factors: (usize, usize, usize)) -> Result<SpectrumCube, RadarError> {
    let (fr, fa, fe) = factors;
    if fr == 0 || fa == 0 || fe == 0 {
        return Err(RadarError::BadFactor("factors must be >= 1".into()));
    }
    let fov = PolarFov::new(
        (cube.fov.r_min, cube.fov.r_max),
        (cube.fov.az_min, cube.fov.az_max),
        (cube.fov.el_min, cube.fov.el_max),
        (cube.fov.n_r * fr, cube.fov.n_az * fa, cube.fov.n_el * fe),
    )
    .map_err(|e| RadarError::BadFactor(e.to_string()))?;

    // Interpolate one axis at a time.
    let lerp_axis = |src: &[f32], dims: [usize; 3], axis: usize, f: usize| -> (Vec<f32>, [usize; 3]) {
        if f == 1 {
            return (src.to_vec(), dims);
        }
        let mut out_dims = dims;
        out_dims[axis] = dims[axis] * f;
        let mut out = vec![0f32; out_dims[0] * out_dims[1] * out_dims[2]];
        let at = |d: [usize; 3], idx: [usize; 3]| (idx[0] * d[1] + idx[1]) * d[2] + idx[2];
        for i in 0..out_dims[0] {
            for j in 0..out_dims[1] {
                for k in 0..out_dims[2] {
                    let oi = [i, j, k];
                    let u = oi[axis] as f64 / f as f64;
                    let lo = u.floor() as usize;
                    let hi = (lo + 1).min(dims[axis] - 1);
                    let t = u - lo as f64;
                    let mut a = oi;
                    a[axis] = lo;
                    let mut b = oi;
                    b[axis] = hi;
                    // Other axes of `a`/`b` index the already-expanded output
                    // axes only when we process axes in order; process from
                    // the source dims instead by mapping back.
                    let src_a = at(dims, a);
                    let src_b = at(dims, b);
                    out[at(out_dims, oi)] =
                        ((1.0 - t) * src[src_a] as f64 + t * src[src_b] as f64) as f32;
                }
            }
        }
        (out, out_dims)
    };

    // Axis-by-axis expansion keeps each pass reading a consistent source
    // layout: after each call, dims reflect the grown axis.
    let dims = [cube.fov.n_r, cube.fov.n_az, cube.fov.n_el];
    let (buf, dims) = lerp_axis(&cube.data, dims, 0, fr);
    let (buf, dims) = lerp_axis(&buf, dims, 1, fa);
    let (buf, dims) = lerp_axis(&buf, dims, 2, fe);
    debug_assert_eq!(dims, [fov.n_r, fov.n_az, fov.n_el]);
    Ok(SpectrumCube { fov, data: buf })
}

// --- on-disk format: raw little-endian f32 blob + JSON sidecar ---

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSidecar {
    pub version: u32,
    pub fov: PolarFov,
    pub layout: String,
    pub dtype: String,
}

const SPECTRUM_VERSION: u32 = 1;

fn sidecar_path(bin_path: &Path) -> PathBuf {
    let mut s = bin_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_spectrum(bin_path: &Path, cube: &SpectrumCube) -> Result<(), RadarError> {
    let sidecar = SpectrumSidecar {
        version: SPECTRUM_VERSION,
        fov: cube.fov.clone(),
        layout: "r,az,el".into(),
        dtype: "f32le".into(),
    };
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin_path, bytes)?;
    fs::write(sidecar_path(bin_path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_spectrum(bin_path: &Path) -> Result<SpectrumCube, RadarError> {
    let sidecar: SpectrumSidecar =
        serde_json::from_str(&fs::read_to_string(sidecar_path(bin_path))?)?;
    if sidecar.version != SPECTRUM_VERSION {
        return Err(RadarError::Version(sidecar.version));
    }
    let bytes = fs::read(bin_path)?;
    let n = sidecar.fov.cell_count();
    if bytes.len() != n * 4 {
        return Err(RadarError::SizeMismatch { expect: n * 4, found: bytes.len() });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SpectrumCube { fov: sidecar.fov, data })
}

/// Detections as CSV with polar and Cartesian coordinates.
pub fn detections_to_csv(fov: &PolarFov, detections: &[Detection]) -> String {
    let mut s = String::from("i,j,k,r,az,el,x,y,z,value,threshold\n");
    for d in detections {
        let (r, az, el) = fov.cell_center(d.idx);
        let p = polar_to_cart(r, az, el);
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            d.idx.i, d.idx.j, d.idx.k, r, az, el, p[0], p[1], p[2], d.value, d.threshold
        ));
    }
    s
}
