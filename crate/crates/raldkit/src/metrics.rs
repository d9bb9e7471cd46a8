//! Point-set distances (Chamfer, EMD) and evaluation reporting.
//!
//! Chamfer uses unsquared Euclidean nearest-neighbor distances averaged in
//! both directions (each direction normalized by its own set size, the total
//! halved). Nearest neighbors come from a uniform-grid index that expands
//! search shells until the bound guarantees exactness, so the fast path
//! returns the same values as brute force.
//!
//! EMD solves the balanced assignment between equal-size sets: exactly (a
//! shortest-augmenting-path Hungarian solver) up to a size cap, and by
//! entropic regularization (log-domain Sinkhorn) above it. Unequal sizes are
//! reconciled by seeded downsampling of the larger set.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::PointCloud;
use crate::scene::downsample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("point cloud is empty: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Uniform-grid spatial index for exact nearest-neighbor queries.
pub struct GridIndex {
    cell: f64,
    origin: [f64; 3],
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
    points: Vec<[f64; 3]>,
}

impl GridIndex {
    pub fn build(points: &[[f64; 3]]) -> Self {
        assert!(!points.is_empty(), "cannot index an empty set");
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).collect();
        let vol: f64 = extent.iter().product();
        // Aim for ~1 point per cell, clamped to keep the grid small.
        let cell = (vol / points.len() as f64).cbrt().max(1e-6);
        let dims: Vec<usize> = (0..3)
            .map(|a| ((extent[a] / cell).ceil() as usize).clamp(1, 64))
            .collect();
        // Recompute the cell so the clamped grid still covers the bbox.
        let cell = (0..3)
            .map(|a| extent[a] / dims[a] as f64)
            .fold(cell, f64::max);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let at = |p: &[f64; 3]| -> usize {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = (((p[a] - lo[a]) / cell) as usize).min(dims[a] - 1);
            }
            (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
        };
        for (i, p) in points.iter().enumerate() {
            buckets[at(p)].push(i as u32);
        }
        Self {
            cell,
            origin: lo,
            dims: [dims[0], dims[1], dims[2]],
            buckets,
            points: points.to_vec(),
        }
    }

    fn cell_of(&self, q: [f64; 3]) -> [i64; 3] {
        let mut idx = [0i64; 3];
        for a in 0..3 {
            idx[a] = ((q[a] - self.origin[a]) / self.cell).floor() as i64;
        }
        idx
    }

    /// Exact nearest-neighbor distance from `q` to the indexed set.
    ///
    /// Shells of Chebyshev radius s (in cell index space) are visited
    /// outward; any point in shell s is at least (s - 1) * cell away — the
    /// query may sit anywhere in, or outside, its own cell — so once
    /// best <= (s - 1) * cell the search is complete. The walk starts at the
    /// first shell that touches the grid (queries can be far outside the
    /// bbox) and stops once every cell has been covered.
    pub fn nearest_dist(&self, q: [f64; 3]) -> f64 {
        let center = self.cell_of(q);
        // Per-axis index gap from the center to the grid.
        let gap = |a: usize| -> i64 {
            if center[a] < 0 {
                -center[a]
            } else if center[a] >= self.dims[a] as i64 {
                center[a] - (self.dims[a] as i64 - 1)
            } else {
                0
            }
        };
        let s_start = (0..3).map(gap).max().unwrap();
        // Every cell index differs from the center by at most gap + dim - 1
        // on its axis, so shells past this radius add nothing.
        let s_all = (0..3)
            .map(|a| gap(a) + self.dims[a] as i64 - 1)
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for s in s_start..=s_all {
            if best <= (s - 1).max(0) as f64 * self.cell {
                break;
            }
            // Cells with Chebyshev distance exactly s, clamped to the grid.
            let clamp = |a: usize| -> std::ops::RangeInclusive<i64> {
                (center[a] - s).max(0)..=(center[a] + s).min(self.dims[a] as i64 - 1)
            };
            for x in clamp(0) {
                for y in clamp(1) {
                    for z in clamp(2) {
                        let cheb = (x - center[0])
                            .abs()
                            .max((y - center[1]).abs())
                            .max((z - center[2]).abs());
                        if cheb != s {
                            continue;
                        }
                        let b = ((x as usize * self.dims[1]) + y as usize) * self.dims[2]
                            + z as usize;
                        for &pi in &self.buckets[b] {
                            let d = dist(q, self.points[pi as usize]);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Nearest-neighbor distance from every point of `from` to the set `to`.
pub fn nearest_neighbor_dists(from: &PointCloud, to: &PointCloud) -> Result<Vec<f64>, MetricsError> {
    if to.is_empty() {
        return Err(MetricsError::Empty("nearest-neighbor target"));
    }
    let index = GridIndex::build(&to.points);
    Ok(from.points.iter().map(|&p| index.nearest_dist(p)).collect())
}

/// Chamfer distance:
/// 0.5 * (mean_p min_q ||p - q|| + mean_q min_p ||q - p||).
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty("chamfer operand"));
    }
    let ab = nearest_neighbor_dists(a, b)?;
    let ba = nearest_neighbor_dists(b, a)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// Exact minimum-cost perfect assignment on a square cost matrix
/// (shortest-augmenting-path Hungarian; O(n^3)). Returns the total cost and
/// the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    assert!(n > 0 && cost.iter().all(|r| r.len() == n), "square matrix required");
    // 1-based arrays; p[j] = row matched to column j.
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    let mut total = 0f64;
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
        total += cost[p[j] - 1][j - 1];
    }
    (total, row_to_col)
}

/// EMD settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmdConfig {
    /// Largest set size solved exactly; larger sets use Sinkhorn.
    pub exact_max: usize,
    /// Entropic regularization as a fraction of the mean pairwise cost.
    pub sinkhorn_eps_rel: f64,
    pub sinkhorn_iters: usize,
}

impl Default for EmdConfig {
    fn default() -> Self {
        Self { exact_max: 512, sinkhorn_eps_rel: 0.01, sinkhorn_iters: 200 }
    }
}

/// Earth mover's distance between point sets, reported as mean per-point
/// transport cost. Sets of different sizes are reconciled by seeded
/// downsampling of the larger one.
pub fn emd(a: &PointCloud, b: &PointCloud, cfg: &EmdConfig, seed: u64) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty("emd operand"));
    }
    if cfg.exact_max == 0 {
        return Err(MetricsError::BadParam("exact_max must be >= 1".into()));
    }
    let n = a.len().min(b.len());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let aa = if a.len() > n { downsample(a, n, &mut rng) } else { a.clone() };
    let bb = if b.len() > n { downsample(b, n, &mut rng) } else { b.clone() };

    if n <= cfg.exact_max {
        let cost: Vec<Vec<f64>> = aa
            .points
            .iter()
            .map(|&p| bb.points.iter().map(|&q| dist(p, q)).collect())
            .collect();
        let (total, _) = hungarian(&cost);
        Ok(total / n as f64)
    } else {
        sinkhorn_emd(&aa, &bb, cfg)
    }
}

/// Log-domain Sinkhorn on uniform marginals; returns the unregularized
/// transport cost of the entropic plan.
fn sinkhorn_emd(a: &PointCloud, b: &PointCloud, cfg: &EmdConfig) -> Result<f64, MetricsError> {
    let n = a.len();
    let m = b.len();
    let mut cost = vec![0f64; n * m];
    let mut mean_cost = 0f64;
    for (i, &p) in a.points.iter().enumerate() {
        for (j, &q) in b.points.iter().enumerate() {
            let d = dist(p, q);
            cost[i * m + j] = d;
            mean_cost += d;
        }
    }
    mean_cost /= (n * m) as f64;
    let eps = (cfg.sinkhorn_eps_rel * mean_cost).max(1e-12);
    let log_mu = -(n as f64).ln();
    let log_nu = -(m as f64).ln();
    let mut f = vec![0f64; n];
    let mut g = vec![0f64; m];
    let logsumexp = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    for _ in 0..cfg.sinkhorn_iters {
        for i in 0..n {
            let lse = logsumexp(&mut (0..m).map(|j| (g[j] - cost[i * m + j]) / eps + log_nu));
            f[i] = -eps * lse;
        }
        for j in 0..m {
            let lse = logsumexp(&mut (0..n).map(|i| (f[i] - cost[i * m + j]) / eps + log_mu));
            g[j] = -eps * lse;
        }
    }
    // <plan, cost>, plan_ij = exp((f_i + g_j - C_ij)/eps) * mu_i * nu_j.
    let mut total = 0f64;
    for i in 0..n {
        for j in 0..m {
            let p = ((f[i] + g[j] - cost[i * m + j]) / eps + log_mu + log_nu).exp();
            total += p * cost[i * m + j];
        }
    }
    Ok(total)
}

/// Distances for one generated/reference pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub chamfer: f64,
    pub emd: f64,
}

/// Chamfer + EMD for one pair.
pub fn evaluate_pair(generated: &PointCloud, reference: &PointCloud, emd_cfg: &EmdConfig, seed: u64) -> Result<FrameMetrics, MetricsError> {
    Ok(FrameMetrics {
        chamfer: chamfer_distance(generated, reference)?,
        emd: emd(generated, reference, emd_cfg, seed)?,
    })
}

/// Aggregate of per-frame metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_frames: usize,
    pub mean_chamfer: f64,
    pub median_chamfer: f64,
    pub mean_emd: f64,
    pub median_emd: f64,
}

pub fn summarize(frames: &[FrameMetrics]) -> Result<MetricsSummary, MetricsError> {
    if frames.is_empty() {
        return Err(MetricsError::Empty("metrics list"));
    }
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cds: Vec<f64> = frames.iter().map(|f| f.chamfer).collect();
    let emds: Vec<f64> = frames.iter().map(|f| f.emd).collect();
    Ok(MetricsSummary {
        n_frames: frames.len(),
        mean_chamfer: mean(&cds),
        median_chamfer: median(cds),
        mean_emd: mean(&emds),
        median_emd: median(emds),
    })
}

/// Empirical CDF as (value, cumulative fraction) steps.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    v.into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n as f64))
        .collect()
}

/// CSV with one row per CDF step per series: label,value,cum_frac.
pub fn cdf_csv(series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("label,value,cum_frac\n");
    for (label, values) in series {
        for (x, f) in empirical_cdf(values) {
            out.push_str(&format!("{label},{x},{f}\n"));
        }
    }
    out
}

/// Self-contained SVG line plot of one or more empirical CDFs.
pub fn cdf_svg(series: &[(String, Vec<f64>)], title: &str, x_label: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0; // left margin
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let x_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().cloned())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;
    let px = |x: f64| ML + (x / x_max) * (W - ML - MR);
    let py = |f: f64| H - MB - f * (H - MT - MB);

    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    s.push_str(&format!(
        r#"<rect width="{W}" height="{H}" fill="white"/><text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#,
        W / 2.0
    ));
    // Axes.
    s.push_str(&format!(
        r#"<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{}" stroke="black"/><line x1="{ML}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - MB,
        H - MB,
        W - MR,
        H - MB
    ));
    // Ticks: 5 on x, 0/0.25/..1 on y.
    for i in 0..=5 {
        let xv = x_max * i as f64 / 5.0;
        let x = px(xv);
        s.push_str(&format!(
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{:.3}</text>"#,
            H - MB,
            H - MB + 5.0,
            H - MB + 18.0,
            xv
        ));
    }
    for i in 0..=4 {
        let fv = i as f64 / 4.0;
        let y = py(fv);
        s.push_str(&format!(
            r#"<line x1="{}" y1="{y}" x2="{ML}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{fv:.2}</text>"#,
            ML - 5.0,
            ML - 8.0,
            y + 4.0
        ));
    }
    s.push_str(&format!(
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{x_label}</text><text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">cumulative fraction</text>"#,
        (ML + W - MR) / 2.0,
        H - 12.0,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    // Series.
    for (si, (label, values)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let cdf = empirical_cdf(values);
        let mut path = format!("M {} {}", px(0.0), py(0.0));
        let mut prev_f = 0.0;
        for (x, f) in &cdf {
            // Step function: horizontal then vertical.
            path.push_str(&format!(" L {} {}", px(*x), py(prev_f)));
            path.push_str(&format!(" L {} {}", px(*x), py(*f)));
            prev_f = *f;
        }
        s.push_str(&format!(
            r#"<path d="{path}" fill="none" stroke="{color}" stroke-width="1.8"/>"#
        ));
        let ly = MT + 16.0 + 18.0 * si as f64;
        s.push_str(&format!(
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{label}</text>"#,
            W - MR - 150.0,
            W - MR - 120.0,
            W - MR - 112.0,
            ly + 4.0
        ));
    }
    s.push_str("</svg>");
    s
}

// ---------------------------------------------------------------------------
// Directory-level evaluation
// ---------------------------------------------------------------------------

/// One scored frame pair.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub scene: usize,
    pub frame: usize,
    pub cd_m: f64,
    pub emd_m: f64,
    pub n_pred: usize,
    pub n_gt: usize,
    /// Which EMD solver the pair sizes selected: "exact" or "sinkhorn".
    pub solver: &'static str,
}

/// Metrics for every frame ID present in both directories. Unmatched IDs
/// are listed, not fatal.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// IDs with ground truth but no prediction, as `scene/frame`.
    pub missing_pred: Vec<(usize, usize)>,
    /// IDs with a prediction but no ground truth.
    pub missing_gt: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("scene_id,frame_id,cd_m,emd_m,n_pred,n_gt,solver\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.scene, r.frame, r.cd_m, r.emd_m, r.n_pred, r.n_gt, r.solver
            ));
        }
        s
    }

    pub fn summary(&self) -> Result<MetricsSummary, MetricsError> {
        let frames: Vec<FrameMetrics> =
            self.rows.iter().map(|r| FrameMetrics { chamfer: r.cd_m, emd: r.emd_m }).collect();
        summarize(&frames)
    }

    /// Per-scene mean (CD, EMD), ordered by scene id.
    pub fn scene_means(&self) -> Vec<(usize, f64, f64)> {
        let mut scenes: Vec<usize> = self.rows.iter().map(|r| r.scene).collect();
        scenes.sort_unstable();
        scenes.dedup();
        scenes
            .into_iter()
            .map(|s| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.scene == s).collect();
                let n = rows.len() as f64;
                (
                    s,
                    rows.iter().map(|r| r.cd_m).sum::<f64>() / n,
                    rows.iter().map(|r| r.emd_m).sum::<f64>() / n,
                )
            })
            .collect()
    }
}

/// Parse `scene<digits>_f<digits>` out of a file stem like
/// `scene0012_f03.lidar.ply`.
fn parse_frame_id(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("scene")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let scene: usize = digits.parse().ok()?;
    let rest = rest[digits.len()..].strip_prefix("_f")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let frame: usize = digits.parse().ok()?;
    match &rest[digits.len()..] {
        "" => Some((scene, frame)),
        tail if tail.starts_with('.') => Some((scene, frame)),
        _ => None,
    }
}

fn scan_ply_dir(
    dir: &std::path::Path,
) -> Result<std::collections::BTreeMap<(usize, usize), std::path::PathBuf>, MetricsError> {
    let mut map = std::collections::BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| MetricsError::BadParam(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| MetricsError::BadParam(e.to_string()))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ply") {
            continue;
        }
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if let Some(id) = parse_frame_id(name) {
                map.insert(id, path);
            }
        }
    }
    Ok(map)
}

/// Which solver [`emd`] will pick for the given pair of sizes.
pub fn emd_solver_label(n_a: usize, n_b: usize, cfg: &EmdConfig) -> &'static str {
    if n_a.min(n_b) <= cfg.exact_max {
        "exact"
    } else {
        "sinkhorn"
    }
}

/// Score every frame ID present in both directories (`scene####_f##*.ply`
/// naming). IDs missing on either side are reported and skipped; score rows
/// are ordered by (scene, frame) so the CSV is deterministic.
pub fn evaluate_dirs(
    pred_dir: &std::path::Path,
    gt_dir: &std::path::Path,
    emd_cfg: &EmdConfig,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    use rayon::prelude::*;
    let pred = scan_ply_dir(pred_dir)?;
    let gt = scan_ply_dir(gt_dir)?;
    let mut report = EvalReport::default();
    report.missing_pred = gt.keys().filter(|id| !pred.contains_key(id)).cloned().collect();
    report.missing_gt = pred.keys().filter(|id| !gt.contains_key(id)).cloned().collect();

    let shared: Vec<(usize, usize)> = pred.keys().filter(|id| gt.contains_key(id)).cloned().collect();
    let rows: Result<Vec<EvalRow>, MetricsError> = shared
        .par_iter()
        .map(|id| {
            let load = |p: &std::path::Path| {
                crate::geom::ply::read_ply(p)
                    .map_err(|e| MetricsError::BadParam(format!("{}: {e}", p.display())))
            };
            let p = load(&pred[id])?;
            let g = load(&gt[id])?;
            let m = evaluate_pair(&p, &g, emd_cfg, seed ^ (id.0 as u64) << 20 ^ id.1 as u64)?;
            Ok(EvalRow {
                scene: id.0,
                frame: id.1,
                cd_m: m.chamfer,
                emd_m: m.emd,
                n_pred: p.points.len(),
                n_gt: g.points.len(),
                solver: emd_solver_label(p.points.len(), g.points.len(), emd_cfg),
            })
        })
        .collect();
    report.rows = rows?;
    report.rows.sort_by_key(|r| (r.scene, r.frame));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    // Both preludes glob-export an `Rng`; pin the one we mean.
    use rand::Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec())
    }

    fn random_cloud(rng: &mut ChaCha12Rng, n: usize, scale: f64) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                    ]
                })
                .collect(),
        )
    }

    fn brute_force_nn(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
        from.points
            .iter()
            .map(|&p| {
                to.points
                    .iter()
                    .map(|&q| dist(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn chamfer_hand_computed() {
        // a = {0, e_x}, b = {0}: d(a->b) = (0 + 1)/2, d(b->a) = 0.
        let a = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0; 3]]);
        let cd = chamfer_distance(&a, &b).unwrap();
        assert!((cd - 0.25).abs() < 1e-12);
    }

    #[test]
    fn chamfer_identity_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = random_cloud(&mut rng, 300, 4.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_empty_is_error() {
        let a = cloud(&[[0.0; 3]]);
        assert!(chamfer_distance(&a, &PointCloud::default()).is_err());
        assert!(chamfer_distance(&PointCloud::default(), &a).is_err());
    }

    #[test]
    fn grid_nn_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for trial in 0..10 {
            let n = rng.gen_range(1..400);
            let m = rng.gen_range(1..400);
            let scale = rng.gen_range(0.5..8.0);
            let scale_b = scale * rng.gen_range(0.3..2.0);
            let a = random_cloud(&mut rng, n, scale);
            let b = random_cloud(&mut rng, m, scale_b);
            let fast = nearest_neighbor_dists(&a, &b).unwrap();
            let slow = brute_force_nn(&a, &b);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-12, "trial {trial}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn grid_nn_degenerate_clouds() {
        // All points identical: bbox has zero extent.
        let b = cloud(&[[1.0, 2.0, 3.0]; 5]);
        let a = cloud(&[[1.0, 2.0, 3.0], [4.0, 2.0, 3.0]]);
        let d = nearest_neighbor_dists(&a, &b).unwrap();
        assert_eq!(d, vec![0.0, 3.0]);
        // Query far outside the index bbox.
        let far = cloud(&[[100.0, -50.0, 7.0]]);
        let d = nearest_neighbor_dists(&far, &b).unwrap();
        assert!((d[0] - dist([100.0, -50.0, 7.0], [1.0, 2.0, 3.0])).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_known() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let (total, assign) = hungarian(&cost);
        assert_eq!(total, 5.0); // 1 + 2 + 2
        assert_eq!(assign, vec![1, 0, 2]);
    }

    #[test]
    fn hungarian_matches_permutation_enumeration() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..7usize);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let (fast, _) = hungarian(&cost);
            // Enumerate all permutations (n <= 6).
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            loop {
                let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                best = best.min(c);
                if !next_permutation(&mut perm) {
                    break;
                }
            }
            assert!((fast - best).abs() < 1e-9, "{fast} vs {best}");
        }
    }

    fn next_permutation(p: &mut [usize]) -> bool {
        let n = p.len();
        if n < 2 {
            return false;
        }
        let mut i = n - 1;
        while i > 0 && p[i - 1] >= p[i] {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        let mut j = n - 1;
        while p[j] <= p[i - 1] {
            j -= 1;
        }
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }

    #[test]
    fn emd_identity_zero_and_translation() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = random_cloud(&mut rng, 40, 2.0);
        let cfg = EmdConfig::default();
        assert!(emd(&a, &a, &cfg, 0).unwrap() < 1e-12);
        // Pure translation: optimal plan moves every point by the shift.
        let shift = [0.3, -0.1, 0.2];
        let b = PointCloud::new(
            a.points
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                .collect(),
        );
        let d = emd(&a, &b, &cfg, 0).unwrap();
        let norm = (shift[0] * shift[0] + shift[1] * shift[1] + shift[2] * shift[2]).sqrt();
        assert!((d - norm).abs() < 1e-9, "{d} vs {norm}");
    }

    #[test]
    fn emd_size_mismatch_downsamples_deterministically() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = random_cloud(&mut rng, 50, 2.0);
        let b = random_cloud(&mut rng, 80, 2.0);
        let cfg = EmdConfig::default();
        let d1 = emd(&a, &b, &cfg, 9).unwrap();
        let d2 = emd(&a, &b, &cfg, 9).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
    }

    #[test]
    fn sinkhorn_close_to_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = random_cloud(&mut rng, 60, 1.5);
        let b = random_cloud(&mut rng, 60, 1.5);
        let exact = emd(&a, &b, &EmdConfig::default(), 0).unwrap();
        // Force the Sinkhorn path by lowering the exact cap.
        let approx = emd(
            &a,
            &b,
            &EmdConfig { exact_max: 8, sinkhorn_eps_rel: 0.01, sinkhorn_iters: 500 },
            0,
        )
        .unwrap();
        let rel = (approx - exact).abs() / exact;
        assert!(rel < 0.05, "sinkhorn {approx} vs exact {exact} (rel {rel})");
        // Entropic plans cannot beat the exact optimum by more than rounding.
        assert!(approx > exact - 1e-9);
    }

    #[test]
    fn summary_and_cdf() {
        let frames = vec![
            FrameMetrics { chamfer: 0.2, emd: 0.4 },
            FrameMetrics { chamfer: 0.4, emd: 0.6 },
            FrameMetrics { chamfer: 0.3, emd: 0.5 },
        ];
        let s = summarize(&frames).unwrap();
        assert!((s.mean_chamfer - 0.3).abs() < 1e-12);
        assert_eq!(s.median_chamfer, 0.3);
        assert_eq!(s.n_frames, 3);
        let cdf = empirical_cdf(&[0.4, 0.2, 0.3]);
        assert_eq!(cdf, vec![(0.2, 1.0 / 3.0), (0.3, 2.0 / 3.0), (0.4, 1.0)]);
        let csv = cdf_csv(&[("m".into(), vec![0.4, 0.2])]);
        assert!(csv.starts_with("label,value,cum_frac\n"));
        assert_eq!(csv.lines().count(), 3);
        let svg = cdf_svg(&[("a".into(), vec![0.1, 0.2]), ("b".into(), vec![0.15])], "t", "x");
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        assert_eq!(svg.matches("<path").count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn chamfer_symmetric(seed in 0u64..1000, na in 1usize..60, nb in 1usize..60) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, na, 3.0);
            let b = random_cloud(&mut rng, nb, 3.0);
            let ab = chamfer_distance(&a, &b).unwrap();
            let ba = chamfer_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn chamfer_translation_invariant(seed in 0u64..1000, t0 in -2.0..2.0, t1 in -2.0..2.0, t2 in -2.0..2.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 40, 3.0);
            let b = random_cloud(&mut rng, 50, 3.0);
            let shift = |pc: &PointCloud| PointCloud::new(
                pc.points.iter().map(|p| [p[0] + t0, p[1] + t1, p[2] + t2]).collect()
            );
            let d0 = chamfer_distance(&a, &b).unwrap();
            let d1 = chamfer_distance(&shift(&a), &shift(&b)).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn chamfer_scale_equivariant(seed in 0u64..1000, s in 0.1f64..4.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 30, 2.0);
            let b = random_cloud(&mut rng, 30, 2.0);
            let scale = |pc: &PointCloud| PointCloud::new(
                pc.points.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect()
            );
            let d0 = chamfer_distance(&a, &b).unwrap();
            let d1 = chamfer_distance(&scale(&a), &scale(&b)).unwrap();
            prop_assert!((d1 - s * d0).abs() < 1e-9 * s.max(1.0));
        }

        #[test]
        fn emd_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 25, 2.0);
            let b = random_cloud(&mut rng, 25, 2.0);
            let mut b_shuf = b.clone();
            b_shuf.points.shuffle(&mut rng);
            let cfg = EmdConfig::default();
            let d0 = emd(&a, &b, &cfg, 0).unwrap();
            let d1 = emd(&a, &b_shuf, &cfg, 0).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn emd_at_least_one_directional_chamfer(seed in 0u64..1000) {
            // Every transport plan moves each point of `a` somewhere in `b`,
            // so mean transport cost >= mean nearest-neighbor distance.
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 20, 2.0);
            let b = random_cloud(&mut rng, 20, 2.0);
            let d_emd = emd(&a, &b, &EmdConfig::default(), 0).unwrap();
            let nn = nearest_neighbor_dists(&a, &b).unwrap();
            let mean_nn = nn.iter().sum::<f64>() / nn.len() as f64;
            prop_assert!(d_emd >= mean_nn - 1e-9);
        }
    }

    #[test]
    fn frame_id_parser_accepts_dataset_and_generation_names() {
        assert_eq!(parse_frame_id("scene0012_f03.lidar.ply"), Some((12, 3)));
        assert_eq!(parse_frame_id("scene0000_f00.ply"), Some((0, 0)));
        assert_eq!(parse_frame_id("scene7_f1"), Some((7, 1)));
        assert_eq!(parse_frame_id("scene_f1.ply"), None);
        assert_eq!(parse_frame_id("scene1_g1.ply"), None);
        assert_eq!(parse_frame_id("scene1_f2x.ply"), None);
        assert_eq!(parse_frame_id("other.ply"), None);
    }

    #[test]
    fn evaluate_dirs_scores_the_intersection_and_lists_the_rest() {
        use crate::geom::ply::write_ply;
        let dir = tempfile::tempdir().unwrap();
        let pred_dir = dir.path().join("pred");
        let gt_dir = dir.path().join("gt");
        std::fs::create_dir_all(&pred_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let shared = random_cloud(&mut rng, 20, 2.0);
        let other = random_cloud(&mut rng, 25, 2.0);
        // Frame (0,0): identical clouds on both sides → zero metrics.
        write_ply(&pred_dir.join("scene0000_f00.ply"), &shared).unwrap();
        write_ply(&gt_dir.join("scene0000_f00.lidar.ply"), &shared).unwrap();
        // Frame (0,1): differing clouds.
        write_ply(&pred_dir.join("scene0000_f01.ply"), &shared).unwrap();
        write_ply(&gt_dir.join("scene0000_f01.lidar.ply"), &other).unwrap();
        // Frame (1,0): ground truth only; frame (2,0): prediction only.
        write_ply(&gt_dir.join("scene0001_f00.lidar.ply"), &other).unwrap();
        write_ply(&pred_dir.join("scene0002_f00.ply"), &other).unwrap();

        let report = evaluate_dirs(&pred_dir, &gt_dir, &EmdConfig::default(), 9).unwrap();
        assert_eq!(report.rows.len(), 2, "only the ID intersection is scored");
        assert_eq!(report.missing_pred, vec![(1, 0)]);
        assert_eq!(report.missing_gt, vec![(2, 0)]);
        assert_eq!((report.rows[0].scene, report.rows[0].frame), (0, 0));
        assert!(report.rows[0].cd_m == 0.0 && report.rows[0].emd_m == 0.0);
        assert!(report.rows[1].cd_m > 0.0 && report.rows[1].emd_m > 0.0);
        assert_eq!(report.rows[0].solver, "exact");
        assert_eq!(report.rows[0].n_pred, 20);
        assert_eq!(report.rows[1].n_gt, 25);

        // The summary equals a recount over the CSV rows.
        let summary = report.summary().unwrap();
        let csv = report.csv();
        let mut cds = Vec::new();
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            cds.push(fields[2].parse::<f64>().unwrap());
        }
        let mean_cd = cds.iter().sum::<f64>() / cds.len() as f64;
        assert!((summary.mean_chamfer - mean_cd).abs() < 1e-12);

        // Per-scene means cover exactly the scored scenes.
        let scenes = report.scene_means();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].0, 0);

        // Deterministic re-run, byte-identical CSV.
        let again = evaluate_dirs(&pred_dir, &gt_dir, &EmdConfig::default(), 9).unwrap();
        assert_eq!(csv, again.csv());
    }

    #[test]
    fn solver_label_matches_the_size_cap() {
        let cfg = EmdConfig { exact_max: 8, ..EmdConfig::default() };
        assert_eq!(emd_solver_label(5, 20, &cfg), "exact");
        assert_eq!(emd_solver_label(9, 9, &cfg), "sinkhorn");
        assert_eq!(emd_solver_label(20, 8, &cfg), "exact");
    }
}
