//! raldkit — radar-spectrum-conditioned 3D point cloud generation via latent
//! diffusion, at desk scale.
//!
//! The pipeline has three trained stages and a fixed geometry core:
//!
//! ```text
//! scene ──raycast──► PointCloud ──label──► FrustumGrid (occupancy ground truth)
//!   │                    │
//!   │                    └──► autoenc: order-invariant encoder ──► LatentSet
//!   └──simulate──► SpectrumCube ──► diffusion: radar-conditioned DiT over latents
//!                        │
//!                        └──► CFAR detections ──► pipeline: query init ──► decoded cloud
//! ```
//!
//! Modules map onto that flow: [`geom`] owns polar frustum partitioning and
//! occupancy labels, [`scene`] generates synthetic datasets, [`radar`] simulates
//! spectrum cubes and runs OS-CFAR, [`nn`] is the differentiable tensor core,
//! [`autoenc`] and [`diffusion`] are the two trained models, [`pipeline`] is the
//! end-to-end generator, [`metrics`] scores clouds with CD/EMD, and [`cli`]
//! exposes everything as subcommands of the `raldkit` binary.
//!
//! Each major capability also has a runnable demo under `examples/`.

pub mod autoenc;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod geom;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod radar;
pub mod scene;

pub use geom::{FrustumGrid, FrustumIndex, PointCloud, PolarFov};
pub use radar::{CfarConfig, Detection, SpectrumCube};
