//! Synthesize a random desk-scale scene, raycast a short LiDAR trajectory
//! through it, and write the frames as PLY files.
//!
//!     cargo run --example simulate_scene [out_dir]

use std::path::PathBuf;

use raldkit::geom::ply::write_ply;
use raldkit::scene::{jitter_poses, random_scene, render_frame, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("raldkit_simulate_scene"));
    std::fs::create_dir_all(&out)?;

    let mut cfg = DatasetConfig::desk_default();
    cfg.frames_per_scene = 4;

    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let scene = random_scene(&cfg.fov_lidar, &cfg.scene_gen, &mut rng);
    println!("scene with {} primitives", scene.primitives.len());

    let poses = jitter_poses(cfg.frames_per_scene, &cfg.jitter, &mut rng);
    for (f, pose) in poses.iter().enumerate() {
        let (lidar, grid, spectrum) = render_frame(&cfg, &scene, pose, 3, 0, f);
        let path = out.join(format!("frame{f:02}.ply"));
        write_ply(&path, &lidar)?;
        println!(
            "frame {f}: pose ({:+.3}, {:+.3}, {:+.3}) yaw {:+.2}°, {} points, \
             {} occupied cells, spectrum peak {:.1}",
            pose.position[0],
            pose.position[1],
            pose.position[2],
            pose.yaw.to_degrees(),
            lidar.points.len(),
            grid.count_occupied(),
            spectrum.data.iter().cloned().fold(f32::MIN, f32::max),
        );
    }
    println!("wrote {} frames to {}", poses.len(), out.display());
    Ok(())
}
