//! Polar/Cartesian geometry, frustum partitioning, and occupancy labeling.
//!
//! A frustum is a volumetric cell in polar coordinates, bounded by half-open
//! range, azimuth, and elevation intervals. The occupancy of a frustum is a
//! binary indicator of whether any point of a cloud falls inside it, and the
//! occupancy of an arbitrary query point is the occupancy of the frustum that
//! contains it. These labels are the ground truth the autoencoder trains on.
//!
//! Conventions: azimuth is `atan2(y, x)`, elevation is `asin(z / r)` (angle
//! from the xy-plane), bins are uniform per axis and half-open `[lo, hi)`,
//! and the global upper FOV boundary is excluded. Queries outside the FOV are
//! defined unoccupied.

pub mod gridio;
pub mod ply;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid field of view: {0}")]
    InvalidFov(String),
    #[error("degenerate bounding box: zero extent on axis {axis}")]
    DegenerateBox { axis: usize },
}

/// Polar field of view with uniform bin counts per axis.
///
/// Angles are radians; ranges are meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarFov {
    pub r_min: f64,
    pub r_max: f64,
    pub az_min: f64,
    pub az_max: f64,
    pub el_min: f64,
    pub el_max: f64,
    pub n_r: usize,
    pub n_az: usize,
    pub n_el: usize,
}

impl PolarFov {
    pub fn new(
        r: (f64, f64),
        az: (f64, f64),
        el: (f64, f64),
        bins: (usize, usize, usize),
    ) -> Result<Self, GeomError> {
        let fov = Self {
            r_min: r.0,
            r_max: r.1,
            az_min: az.0,
            az_max: az.1,
            el_min: el.0,
            el_max: el.1,
            n_r: bins.0,
            n_az: bins.1,
            n_el: bins.2,
        };
        fov.validate()?;
        Ok(fov)
    }

    /// Desk-scale default: r in [0, 8] m, azimuth ±60°, elevation ±15°,
    /// 160 x 32 x 16 bins (0.05 m range resolution).
    pub fn desk_default() -> Self {
        Self {
            r_min: 0.0,
            r_max: 8.0,
            az_min: -60f64.to_radians(),
            az_max: 60f64.to_radians(),
            el_min: -15f64.to_radians(),
            el_max: 15f64.to_radians(),
            n_r: 160,
            n_az: 32,
            n_el: 16,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.r_min >= 0.0) {
            return Err(GeomError::InvalidFov("r_min must be >= 0".into()));
        }
        if !(self.r_min < self.r_max) {
            return Err(GeomError::InvalidFov("r_min must be < r_max".into()));
        }
        if !(self.az_min < self.az_max) {
            return Err(GeomError::InvalidFov("az_min must be < az_max".into()));
        }
        if !(self.el_min < self.el_max) {
            return Err(GeomError::InvalidFov("el_min must be < el_max".into()));
        }
        if self.n_r == 0 || self.n_az == 0 || self.n_el == 0 {
            return Err(GeomError::InvalidFov("bin counts must be >= 1".into()));
        }
        for v in [
            self.r_min, self.r_max, self.az_min, self.az_max, self.el_min, self.el_max,
        ] {
            if !v.is_finite() {
                return Err(GeomError::InvalidFov("bounds must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.n_r * self.n_az * self.n_el
    }

    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / self.n_r as f64
    }

    pub fn daz(&self) -> f64 {
        (self.az_max - self.az_min) / self.n_az as f64
    }

    pub fn del(&self) -> f64 {
        (self.el_max - self.el_min) / self.n_el as f64
    }

    /// Polar center of cell (i, j, k).
    pub fn cell_center(&self, idx: FrustumIndex) -> (f64, f64, f64) {
        (
            self.r_min + (idx.i as f64 + 0.5) * self.dr(),
            self.az_min + (idx.j as f64 + 0.5) * self.daz(),
            self.el_min + (idx.k as f64 + 0.5) * self.del(),
        )
    }

    /// Lower polar corner of cell (i, j, k).
    pub fn cell_lo(&self, idx: FrustumIndex) -> (f64, f64, f64) {
        (
            self.r_min + idx.i as f64 * self.dr(),
            self.az_min + idx.j as f64 * self.daz(),
            self.el_min + idx.k as f64 * self.del(),
        )
    }

    /// A FOV over the same polar bounds with bin counts divided by the given
    /// per-axis factors. Counts must divide exactly.
    pub fn coarsened(&self, f_r: usize, f_az: usize, f_el: usize) -> Result<Self, GeomError> {
        if f_r == 0 || f_az == 0 || f_el == 0 {
            return Err(GeomError::InvalidFov("coarsening factors must be >= 1".into()));
        }
        if self.n_r % f_r != 0 || self.n_az % f_az != 0 || self.n_el % f_el != 0 {
            return Err(GeomError::InvalidFov(format!(
                "bin counts {}x{}x{} not divisible by factors {}x{}x{}",
                self.n_r, self.n_az, self.n_el, f_r, f_az, f_el
            )));
        }
        Self::new(
            (self.r_min, self.r_max),
            (self.az_min, self.az_max),
            (self.el_min, self.el_max),
            (self.n_r / f_r, self.n_az / f_az, self.n_el / f_el),
        )
    }

    /// Axis-aligned Cartesian bounding box of the FOV volume, as (lo, hi).
    ///
    /// Coordinate extrema of (r cos el cos az, r cos el sin az, r sin el) over
    /// the polar box occur at interval endpoints or at the interior critical
    /// angles (0, ±pi/2), so it suffices to scan that candidate set.
    pub fn cartesian_bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut az_c = vec![self.az_min, self.az_max];
        let mut el_c = vec![self.el_min, self.el_max];
        for crit in [-std::f64::consts::PI / 2.0, 0.0, std::f64::consts::PI / 2.0] {
            if self.az_min < crit && crit < self.az_max {
                az_c.push(crit);
            }
            if self.el_min < crit && crit < self.el_max {
                el_c.push(crit);
            }
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &r in &[self.r_min, self.r_max] {
            for &az in &az_c {
                for &el in &el_c {
                    let p = polar_to_cart(r, az, el);
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
        (lo, hi)
    }

    /// True if the polar coordinates fall inside the half-open FOV box.
    pub fn contains_polar(&self, r: f64, az: f64, el: f64) -> bool {
        r >= self.r_min
            && r < self.r_max
            && az >= self.az_min
            && az < self.az_max
            && el >= self.el_min
            && el < self.el_max
    }
}

/// Bin indices (range, azimuth, elevation) of one frustum cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrustumIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl FrustumIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }
}

/// Unordered set of 3D points in the sensor frame, meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Convert a Cartesian point to (range, azimuth, elevation).
///
/// Total on finite inputs: the origin maps to (0, 0, 0).
pub fn cart_to_polar(p: [f64; 3]) -> (f64, f64, f64) {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let az = p[1].atan2(p[0]);
    let el = (p[2] / r).clamp(-1.0, 1.0).asin();
    (r, az, el)
}

pub fn polar_to_cart(r: f64, az: f64, el: f64) -> [f64; 3] {
    let (s_el, c_el) = el.sin_cos();
    let (s_az, c_az) = az.sin_cos();
    [r * c_el * c_az, r * c_el * s_az, r * s_el]
}

/// Frustum index of a Cartesian point, or `None` if any polar coordinate is
/// outside the FOV (the exact upper boundary is outside).
pub fn frustum_index(fov: &PolarFov, p: [f64; 3]) -> Option<FrustumIndex> {
    let (r, az, el) = cart_to_polar(p);
    polar_frustum_index(fov, r, az, el)
}

/// Same as [`frustum_index`] for already-converted polar coordinates.
pub fn polar_frustum_index(fov: &PolarFov, r: f64, az: f64, el: f64) -> Option<FrustumIndex> {
    if !fov.contains_polar(r, az, el) {
        return None;
    }
    // contains_polar guarantees value < max, but floor((v - lo) / d) can still
    // land on the bin count when (max - lo) / d rounds up; clamp to the last bin.
    let bin = |v: f64, lo: f64, d: f64, n: usize| -> usize {
        (((v - lo) / d).floor() as usize).min(n - 1)
    };
    Some(FrustumIndex {
        i: bin(r, fov.r_min, fov.dr(), fov.n_r),
        j: bin(az, fov.az_min, fov.daz(), fov.n_az),
        k: bin(el, fov.el_min, fov.del(), fov.n_el),
    })
}

/// Dense binary occupancy over the frustum grid of a FOV.
///
/// Layout is row-major with i slowest and k fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumGrid {
    fov: PolarFov,
    occ: BitBuf,
}

impl FrustumGrid {
    pub fn empty(fov: PolarFov) -> Self {
        let n = fov.cell_count();
        Self { fov, occ: BitBuf::zeros(n) }
    }

    pub fn fov(&self) -> &PolarFov {
        &self.fov
    }

    pub fn flat(&self, idx: FrustumIndex) -> usize {
        (idx.i * self.fov.n_az + idx.j) * self.fov.n_el + idx.k
    }

    pub fn get(&self, idx: FrustumIndex) -> bool {
        self.occ.get(self.flat(idx))
    }

    pub fn set(&mut self, idx: FrustumIndex, v: bool) {
        let f = self.flat(idx);
        self.occ.set(f, v);
    }

    pub fn count_occupied(&self) -> usize {
        self.occ.count_ones()
    }

    /// Indices of all occupied cells, in layout order.
    pub fn occupied_cells(&self) -> Vec<FrustumIndex> {
        let mut out = Vec::new();
        for i in 0..self.fov.n_r {
            for j in 0..self.fov.n_az {
                for k in 0..self.fov.n_el {
                    let idx = FrustumIndex { i, j, k };
                    if self.get(idx) {
                        out.push(idx);
                    }
                }
            }
        }
        out
    }

    pub fn bits(&self) -> &BitBuf {
        &self.occ
    }

    pub(crate) fn from_parts(fov: PolarFov, occ: BitBuf) -> Self {
        assert_eq!(occ.len(), fov.cell_count());
        Self { fov, occ }
    }
}

/// Label frustum occupancy: a cell is occupied iff at least one point of the
/// cloud maps into it. Points outside the FOV are ignored.
pub fn label_occupancy(fov: &PolarFov, pc: &PointCloud) -> FrustumGrid {
    let mut grid = FrustumGrid::empty(fov.clone());
    for &p in &pc.points {
        if let Some(idx) = frustum_index(fov, p) {
            grid.set(idx, true);
        }
    }
    grid
}

/// Occupancy of a query point: the occupancy of its frustum, 0 outside the FOV.
pub fn query_occupancy(grid: &FrustumGrid, q: [f64; 3]) -> bool {
    match frustum_index(grid.fov(), q) {
        Some(idx) => grid.get(idx),
        None => false,
    }
}

/// Dense Cartesian occupancy over an axis-aligned box, the voxel analogue of
/// [`FrustumGrid`] used by the voxel-vs-frustum ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub voxel: [f64; 3],
    pub dims: [usize; 3],
    occ: BitBuf,
}

impl VoxelGrid {
    pub fn empty(voxel: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Result<Self, GeomError> {
        for a in 0..3 {
            if !(voxel[a] > 0.0) {
                return Err(GeomError::InvalidFov("voxel sizes must be positive".into()));
            }
            if !(hi[a] > lo[a]) {
                return Err(GeomError::DegenerateBox { axis: a });
            }
        }
        let dims = [
            ((hi[0] - lo[0]) / voxel[0]).ceil() as usize,
            ((hi[1] - lo[1]) / voxel[1]).ceil() as usize,
            ((hi[2] - lo[2]) / voxel[2]).ceil() as usize,
        ];
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self { lo, hi, voxel, dims, occ: BitBuf::zeros(n) })
    }

    pub fn index(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if p[a] < self.lo[a] || p[a] >= self.hi[a] {
                return None;
            }
            idx[a] = (((p[a] - self.lo[a]) / self.voxel[a]).floor() as usize).min(self.dims[a] - 1);
        }
        Some(idx)
    }

    fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn get(&self, idx: [usize; 3]) -> bool {
        self.occ.get(self.flat(idx))
    }

    pub fn set(&mut self, idx: [usize; 3], v: bool) {
        let f = self.flat(idx);
        self.occ.set(f, v);
    }

    pub fn query(&self, p: [f64; 3]) -> bool {
        match self.index(p) {
            Some(idx) => self.get(idx),
            None => false,
        }
    }

    pub fn count_occupied(&self) -> usize {
        self.occ.count_ones()
    }

    /// Lower corner of a voxel.
    pub fn voxel_lo(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.lo[0] + idx[0] as f64 * self.voxel[0],
            self.lo[1] + idx[1] as f64 * self.voxel[1],
            self.lo[2] + idx[2] as f64 * self.voxel[2],
        ]
    }

    pub fn occupied_voxels(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    if self.get([x, y, z]) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Cartesian analogue of [`label_occupancy`] over a voxel grid.
pub fn label_occupancy_voxel(
    voxel: [f64; 3],
    lo: [f64; 3],
    hi: [f64; 3],
    pc: &PointCloud,
) -> Result<VoxelGrid, GeomError> {
    let mut grid = VoxelGrid::empty(voxel, lo, hi)?;
    for &p in &pc.points {
        if let Some(idx) = grid.index(p) {
            let f = grid.flat(idx);
            grid.occ.set(f, true);
        }
    }
    Ok(grid)
}

/// Affine map between the FOV's Cartesian bounding box and the cube [-1, 1]^3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeMap {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl NormalizeMap {
    pub fn from_fov(fov: &PolarFov) -> Result<Self, GeomError> {
        let (lo, hi) = fov.cartesian_bbox();
        Self::from_box(lo, hi)
    }

    pub fn from_box(lo: [f64; 3], hi: [f64; 3]) -> Result<Self, GeomError> {
        let mut center = [0.0; 3];
        let mut half = [0.0; 3];
        for a in 0..3 {
            if !(hi[a] > lo[a]) {
                return Err(GeomError::DegenerateBox { axis: a });
            }
            center[a] = 0.5 * (lo[a] + hi[a]);
            half[a] = 0.5 * (hi[a] - lo[a]);
        }
        Ok(Self { center, half_extent: half })
    }

    pub fn forward(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.center[0]) / self.half_extent[0],
            (p[1] - self.center[1]) / self.half_extent[1],
            (p[2] - self.center[2]) / self.half_extent[2],
        ]
    }

    pub fn inverse(&self, n: [f64; 3]) -> [f64; 3] {
        [
            n[0] * self.half_extent[0] + self.center[0],
            n[1] * self.half_extent[1] + self.center[1],
            n[2] * self.half_extent[2] + self.center[2],
        ]
    }
}

/// Normalize a cloud into [-1, 1]^3 using the FOV bounding box; the returned
/// map inverts the transform.
pub fn normalize_points(pc: &PointCloud, fov: &PolarFov) -> Result<(PointCloud, NormalizeMap), GeomError> {
    let map = NormalizeMap::from_fov(fov)?;
    let points = pc.points.iter().map(|&p| map.forward(p)).collect();
    Ok((PointCloud::new(points), map))
}

/// Packed bit buffer, LSB-first within each byte. Backs the occupancy grids
/// and their on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct BitBuf {
    len: usize,
    bytes: Vec<u8>,
}

impl BitBuf {
    pub fn zeros(len: usize) -> Self {
        Self { len, bytes: vec![0u8; len.div_ceil(8)] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {} out of range {}", i, self.len);
        (self.bytes[i / 8] >> (i % 8)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit index {} out of range {}", i, self.len);
        if v {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        Some(Self { len, bytes })
    }
}
