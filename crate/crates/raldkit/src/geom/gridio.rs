//! On-disk format for occupancy grids: a raw little-endian packed-bit file
//! plus a JSON sidecar describing the field of view and layout.
//!
//! `grid.bin` holds the bit buffer bytes (LSB-first, i slowest / k fastest,
//! zero-padded to a whole byte); `grid.bin.json` holds the metadata needed to
//! interpret it. Writing the pair then reading it back is byte-identical.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BitBuf, FrustumGrid, PolarFov};

#[derive(Debug, Error)]
pub enum GridIoError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("blob is {found} bytes, sidecar implies {expect}")]
    SizeMismatch { expect: usize, found: usize },
    #[error("unsupported grid format version {0}")]
    Version(u32),
}

/// Sidecar metadata for a packed occupancy blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSidecar {
    pub version: u32,
    pub fov: PolarFov,
    /// Axis order of the flattened layout, slowest first.
    pub layout: String,
    pub bit_order: String,
    pub n_cells: usize,
}

const GRID_VERSION: u32 = 1;

fn sidecar_path(bin_path: &Path) -> std::path::PathBuf {
    let mut s = bin_path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn write_grid(bin_path: &Path, grid: &FrustumGrid) -> Result<(), GridIoError> {
    let sidecar = GridSidecar {
        version: GRID_VERSION,
        fov: grid.fov().clone(),
        layout: "r,az,el".into(),
        bit_order: "lsb_first".into(),
        n_cells: grid.fov().cell_count(),
    };
    fs::write(bin_path, grid.bits().as_bytes())?;
    fs::write(sidecar_path(bin_path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_grid(bin_path: &Path) -> Result<FrustumGrid, GridIoError> {
    let sidecar: GridSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(bin_path))?)?;
    if sidecar.version != GRID_VERSION {
        return Err(GridIoError::Version(sidecar.version));
    }
    let bytes = fs::read(bin_path)?;
    let n = sidecar.fov.cell_count();
    let bits = BitBuf::from_bytes(n, bytes.clone()).ok_or(GridIoError::SizeMismatch {
        expect: n.div_ceil(8),
        found: bytes.len(),
    })?;
    Ok(FrustumGrid::from_parts(sidecar.fov, bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{label_occupancy, polar_to_cart, PointCloud};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn sample_grid(seed: u64) -> FrustumGrid {
        let fov = PolarFov::new((0.0, 4.0), (-0.8, 0.8), (-0.3, 0.3), (16, 8, 4)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                polar_to_cart(
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.3..0.3),
                )
            })
            .collect();
        label_occupancy(&fov, &PointCloud::new(pts))
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.bin");
        let grid = sample_grid(3);
        write_grid(&path, &grid).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let grid = sample_grid(4);
        write_grid(&a, &grid).unwrap();
        write_grid(&b, &grid).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(
            fs::read(sidecar_path(&a)).unwrap(),
            fs::read(sidecar_path(&b)).unwrap()
        );
    }

    #[test]
    fn size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.bin");
        let grid = sample_grid(5);
        write_grid(&path, &grid).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_grid(&path), Err(GridIoError::SizeMismatch { .. })));
    }
}
