//! Learning unsigned distance fields (UDFs) for open surfaces from fused
//! raw-point and voxel features, and extracting dense surface point clouds by
//! iterative gradient projection.
//!
//! The crate is organised bottom-up:
//!
//! * [`geom`]: point clouds, triangle meshes, normalization, exact
//!   point-to-mesh distance, surface sampling, voxelization and mesh/cloud IO.
//! * [`diff`]: a deliberately small set of differentiable tensor operations
//!   with hand-written gradients, plus the checkpoint container.
//! * [`model`]: point encoder, fused point-voxel encoder, latent assembly,
//!   neighborhood feature sampling and the distance decoder.
//! * [`training`]: query generation, the clamped L1 loss, Adam and the
//!   training loop.
//! * [`inference`]: gradient projection and the surface point inference
//!   pipeline.
//! * [`metrics`]: chamfer-L2, precision, recall and F-score.
//! * [`oracles`]: closed-form distance fields and procedural open meshes.

pub mod diff;
pub mod error;
pub mod geom;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod oracles;
mod rng;
pub mod training;

pub use error::{Error, Result};
pub use geom::{PointCloud, TriangleMesh, Vec3};
