//! Radar spectrum simulation and ordered-statistics CFAR detection: render
//! a scene, form its amplitude cube, calibrate the detector to a design
//! false-alarm rate, and turn detections back into 3D points.
//!
//!     cargo run --example radar_spectrum_cfar

use raldkit::geom::PointCloud;
use raldkit::radar::{
    calibrate_alpha, cfar_to_points, detections_to_csv, os_cfar, os_cfar_pfa, simulate_spectrum,
    CfarConfig, SpectrumParams,
};
use raldkit::scene::{jitter_poses, random_scene, render_frame, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DatasetConfig::desk_default();
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let scene = random_scene(&cfg.fov_lidar, &cfg.scene_gen, &mut rng);
    let pose = jitter_poses(1, &cfg.jitter, &mut rng)[0];
    let (lidar, _grid, spectrum) = render_frame(&cfg, &scene, &pose, 5, 0, 0);
    println!(
        "spectrum cube {}x{}x{}, lidar reference {} points",
        spectrum.fov.n_r,
        spectrum.fov.n_az,
        spectrum.fov.n_el,
        lidar.points.len()
    );

    // Calibrate the threshold multiplier so that on pure speckle the
    // detector fires at the design rate.
    let p_fa = 1e-3;
    let geom = CfarConfig { window: [4, 2, 1], guard: [1, 1, 0], k: 94, alpha: 1.0 };
    let n_ref = geom.full_reference_count();
    let alpha = calibrate_alpha(p_fa, n_ref, geom.k)?;
    let detector = CfarConfig { alpha, ..geom };
    println!(
        "calibrated alpha = {alpha:.3} over {n_ref} reference cells \
         (analytic P_fa = {:.2e})",
        os_cfar_pfa(alpha, n_ref, detector.k)
    );

    // Sanity-check the calibration on a noise-only cube.
    let empty = PointCloud::new(vec![]);
    let noise =
        simulate_spectrum(&cfg.fov_radar, &empty, None, &SpectrumParams::default(), &mut rng);
    let false_alarms = os_cfar(&noise, &detector)?;
    println!(
        "noise-only cube: {} alarms over {} cells (empirical P_fa = {:.2e})",
        false_alarms.len(),
        noise.data.len(),
        false_alarms.len() as f64 / noise.data.len() as f64
    );

    // Real frame: detections and their back-projected 3D positions.
    let detections = os_cfar(&spectrum, &detector)?;
    let points = cfar_to_points(&spectrum.fov, &detections);
    println!("scene frame: {} detections", detections.len());
    for d in detections.iter().take(5) {
        println!(
            "  cell ({:3},{:2},{:2}) value {:8.1} vs threshold {:8.1}",
            d.idx.i, d.idx.j, d.idx.k, d.value, d.threshold
        );
    }
    let csv = detections_to_csv(&spectrum.fov, &detections);
    println!(
        "first detection rows:\n{}",
        csv.lines().take(4).collect::<Vec<_>>().join("\n")
    );
    println!("(point cloud form: {} points)", points.points.len());
    Ok(())
}
