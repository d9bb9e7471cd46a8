//! Train a small set-to-set occupancy autoencoder on a handful of
//! synthetic frames, then reconstruct one frame and score it.
//!
//! The model maps a point cloud to M latent tokens via cross-attention and
//! decodes occupancy probabilities at arbitrary query positions. Kept tiny
//! here so it trains in seconds; desk defaults are in `AeConfig::desk_default`.
//!
//!     cargo run --release --example train_autoencoder

use raldkit::autoenc::{
    decode_grid, decode_occupancy, encode_cloud, prepare_frames, train_autoencoder, AeConfig,
    TrainAeConfig,
};
use raldkit::geom::{NormalizeMap, PointCloud, PolarFov};
use raldkit::metrics::chamfer_distance;
use raldkit::scene::{jitter_poses, random_scene, render_frame, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Scaled-down geometry so the demo converges in a couple of minutes;
    // desk-scale numbers live in the config defaults.
    let mut data_cfg = DatasetConfig::desk_default();
    data_cfg.fov_lidar = PolarFov { n_r: 48, n_az: 16, n_el: 8, ..data_cfg.fov_lidar };
    data_cfg.fov_radar = data_cfg.fov_lidar.coarsened(1, 2, 2)?;
    data_cfg.n_points = 256;

    // A few frames from a few scenes, straight into memory.
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let mut frames = Vec::new();
    for s in 0..2 {
        let scene = random_scene(&data_cfg.fov_lidar, &data_cfg.scene_gen, &mut rng);
        for (f, pose) in jitter_poses(2, &data_cfg.jitter, &mut rng).iter().enumerate() {
            let (lidar, grid, spectrum) = render_frame(&data_cfg, &scene, pose, 21, s, f);
            frames.push(raldkit::scene::FrameData {
                entry: raldkit::scene::FrameEntry {
                    scene: s,
                    frame: f,
                    split: "train".into(),
                    pose: *pose,
                    lidar_ply: String::new(),
                    grid_bin: String::new(),
                    spectrum_bin: String::new(),
                },
                lidar,
                grid,
                spectrum,
            });
        }
    }
    println!("{} frames of {} points each", frames.len(), data_cfg.n_points);

    let ae = AeConfig {
        m_latent: 16,
        d_latent: 8,
        d_model: 32,
        ..AeConfig::desk_default()
    };
    // A tiny run needs a richer positive signal than the full training
    // schedule: more queries per frame and a higher occupied fraction.
    let tr = TrainAeConfig {
        epochs: 60,
        batch_frames: 1,
        queries_per_frame: 384,
        pos_fraction: 0.25,
        lr: 2e-3,
        ..TrainAeConfig::desk_default()
    };
    let ae_frames = prepare_frames(&ae, &data_cfg.fov_lidar, &frames)?;
    let norm = NormalizeMap::from_fov(&data_cfg.fov_lidar)?;
    let (store, report) = train_autoencoder(&ae, &tr, &norm, &ae_frames, None)?;
    for (e, loss) in report.epoch_loss.iter().enumerate().step_by(10) {
        println!("epoch {e}: loss {loss:.4}");
    }
    println!(
        "latent stats: mean[0] {:+.3}, std[0] {:.3} over {} channels",
        report.latent_mean[0],
        report.latent_std[0],
        report.latent_std.len()
    );

    // Round-trip one frame: encode the cloud, decode a dense occupancy
    // grid, compare occupied-cell centers against the input points.
    let target = &frames[0].lidar;
    let z = encode_cloud(&store, &ae, &norm, target, 0)?;
    let at_surface: Vec<[f64; 3]> = target.points.iter().map(|&p| norm.forward(p)).collect();
    let probs = decode_occupancy(&store, &ae, &z, &at_surface);
    let mean_p = probs.iter().map(|&p| p as f64).sum::<f64>() / probs.len() as f64;
    println!("mean decoder probability at the input points: {mean_p:.2}");

    let threshold = 0.5;
    let recon = decode_grid(&store, &ae, &data_cfg.fov_lidar, &norm, &z, threshold)?;
    let centers = recon.occupied_centers();
    println!("reconstruction at p>{threshold}: {} occupied cells", centers.len());
    if !centers.is_empty() {
        let cd = chamfer_distance(&PointCloud::new(centers), target)?;
        println!("chamfer distance to input: {cd:.3} m");
    } else {
        println!("(decoder still too uncertain at this threshold — train longer)");
    }
    Ok(())
}
