//! Polar-frustum grids: how a sensor's field of view is discretized, how
//! points map to cells, and how frustum cells compare to metric voxels.
//!
//!     cargo run --example frustum_occupancy

use raldkit::autoenc::{AeConfig, GridMode, OccGrid};
use raldkit::geom::{
    cart_to_polar, frustum_index, label_occupancy, polar_to_cart, NormalizeMap, PolarFov,
    PointCloud,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fov = PolarFov::desk_default();
    println!(
        "field of view: {:.1}..{:.1} m, az ±{:.0}°, el ±{:.0}°, {}x{}x{} = {} cells",
        fov.r_min,
        fov.r_max,
        fov.az_max.to_degrees(),
        fov.el_max.to_degrees(),
        fov.n_r,
        fov.n_az,
        fov.n_el,
        fov.cell_count()
    );

    // Frustum cells grow with range: compare the metric footprint of a
    // near cell and a far cell at the same angular index.
    for (label, r) in [("near", 0.5), ("far", 7.5)] {
        let idx = frustum_index(&fov, polar_to_cart(r, 0.0, 0.0)).unwrap();
        let (rc, azc, _) = fov.cell_center(idx);
        let dr = (fov.r_max - fov.r_min) / fov.n_r as f64;
        let daz = (fov.az_max - fov.az_min) / fov.n_az as f64;
        println!(
            "{label} cell at r={rc:.2} m: radial {dr:.3} m x tangential {:.3} m",
            rc * daz
        );
        let _ = azc;
    }

    // Round trips: cartesian -> polar -> cartesian, and through the
    // normalization map used by every network input.
    let p = polar_to_cart(3.0, 0.4, -0.1);
    let (r, az, el) = cart_to_polar(p);
    let back = polar_to_cart(r, az, el);
    println!("polar round trip error: {:.2e}", dist(p, back));
    let norm = NormalizeMap::from_fov(&fov)?;
    let q = norm.inverse(norm.forward(p));
    println!("normalize round trip error: {:.2e}", dist(p, q));

    // Occupancy labeling on a synthetic wall of points at ~4 m.
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let pts: Vec<[f64; 3]> = (0..2000)
        .map(|_| {
            [
                4.0 + rng.gen_range(-0.05..0.05),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.8..0.8),
            ]
        })
        .collect();
    let cloud = PointCloud::new(pts);
    let grid = label_occupancy(&fov, &cloud);
    println!(
        "wall of {} points occupies {} frustum cells",
        cloud.points.len(),
        grid.count_occupied()
    );

    // The same cloud under the two grid modes the autoencoder can target.
    let cfg = AeConfig { grid_mode: GridMode::Voxel, ..AeConfig::desk_default() };
    let vox = OccGrid::from_cloud(&cfg, &fov, &cloud)?;
    println!(
        "voxel grid ({} m cells): {} occupied; frustum grid: {} occupied",
        cfg.voxel_size[0],
        vox.count_occupied(),
        grid.count_occupied()
    );
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
