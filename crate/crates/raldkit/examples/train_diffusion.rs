//! Train a latent diffusion model on top of a frozen autoencoder, with the
//! denoiser conditioned on radar spectra through a small convolutional
//! encoder; then draw a sample and warm-start a fine-tuning run.
//!
//!     cargo run --release --example train_diffusion

use raldkit::autoenc::{prepare_frames, train_autoencoder, AeConfig, TrainAeConfig};
use raldkit::diffusion::{
    condition_tokens, edm_heun_sample, prepare_dm_frames, train_diffusion, CondSource, DmConfig,
    LatentStats, TrainDmConfig,
};
use raldkit::geom::{NormalizeMap, PolarFov};
use raldkit::scene::{jitter_poses, random_scene, render_frame, DatasetConfig, FrameData, FrameEntry};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Scaled-down geometry so the whole two-stage run takes seconds.
    let mut data_cfg = DatasetConfig::desk_default();
    data_cfg.fov_lidar = PolarFov { n_r: 32, n_az: 32, n_el: 16, ..data_cfg.fov_lidar };
    data_cfg.fov_radar = data_cfg.fov_lidar.coarsened(1, 4, 4)?;
    data_cfg.n_points = 128;

    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let mut frames = Vec::new();
    for s in 0..4 {
        let scene = random_scene(&data_cfg.fov_lidar, &data_cfg.scene_gen, &mut rng);
        for (f, pose) in jitter_poses(2, &data_cfg.jitter, &mut rng).iter().enumerate() {
            let (lidar, grid, spectrum) = render_frame(&data_cfg, &scene, pose, 2, s, f);
            frames.push(FrameData {
                entry: FrameEntry {
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

    // Stage one: the autoencoder that defines the latent space.
    let ae = AeConfig { m_latent: 8, d_latent: 4, d_model: 16, n_heads: 2, ..AeConfig::desk_default() };
    let ae_tr = TrainAeConfig { epochs: 4, queries_per_frame: 128, ..TrainAeConfig::desk_default() };
    let ae_frames = prepare_frames(&ae, &data_cfg.fov_lidar, &frames)?;
    let norm = NormalizeMap::from_fov(&data_cfg.fov_lidar)?;
    let (ae_store, ae_report) = train_autoencoder(&ae, &ae_tr, &norm, &ae_frames, None)?;
    println!(
        "autoencoder: {} epochs, final loss {:.4}",
        ae_tr.epochs,
        ae_report.epoch_loss.last().unwrap()
    );

    // Stage two: diffusion over standardized latents, conditioned on the
    // radar cube through the convolutional spectrum encoder.
    let stats = LatentStats { mean: ae_report.latent_mean.clone(), std: ae_report.latent_std.clone() };
    let mut dm = DmConfig::desk_default();
    dm.dit.depth = 1;
    dm.dit.width = 16;
    dm.dit.heads = 2;
    dm.dit.m_latent = ae.m_latent;
    dm.dit.d_latent = ae.d_latent;
    dm.dit.d_cond = 8;
    dm.renc.expect_dims = [32, 8, 4];
    dm.renc.channels = [4, 6, 8];
    dm.renc.bands = 2;
    dm.cond_source = CondSource::RadarEncoder;

    let dm_frames = prepare_dm_frames(&ae_store, &ae, &stats, &norm, &frames, 9)?;
    let tr = TrainDmConfig { epochs: 4, batch: 2, ..TrainDmConfig::desk_default() };
    let (dm_store, report) = train_diffusion(&dm, &tr, &dm_frames, None, None, None)?;
    for (e, loss) in report.epoch_loss.iter().enumerate() {
        println!("diffusion epoch {e}: loss {loss:.4}");
    }

    // Sample one latent set conditioned on a training spectrum.
    let cond = condition_tokens(&dm_store, &dm, Some(&frames[0].spectrum))?;
    let mut sample_rng = ChaCha12Rng::seed_from_u64(31);
    let z = edm_heun_sample(&dm_store, &dm, cond.as_ref(), &mut sample_rng)?;
    let m = z.data.iter().map(|&v| v as f64).sum::<f64>() / z.data.len() as f64;
    let v = z.data.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / z.data.len() as f64;
    println!(
        "sampled latent set {}x{}: mean {m:+.3}, std {:.3} (standardized space)",
        ae.m_latent,
        ae.d_latent,
        v.sqrt()
    );

    // Warm start: continue from the trained weights for a couple of epochs,
    // as one would on a new scene. The first epoch should sit near the
    // donor's final loss rather than at a fresh model's.
    let ft = TrainDmConfig { epochs: 2, batch: 2, ..TrainDmConfig::desk_default() };
    let (_tuned, ft_report) = train_diffusion(&dm, &ft, &dm_frames, None, Some(dm_store), None)?;
    println!(
        "fine-tune: donor final {:.4} -> warm first epoch {:.4}",
        report.epoch_loss.last().unwrap(),
        ft_report.epoch_loss[0]
    );
    Ok(())
}
