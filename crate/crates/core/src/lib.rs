//! Multi-view texture synthesis toolkit.
//!
//! The pipeline turns a UV-parameterized triangle mesh plus a reference image
//! into a set of mutually consistent view renders and finally a baked UV
//! texture:
//!
//! 1. [`geometry`] rasterizes per-view condition maps (canonical coordinates,
//!    normals, coverage, UV, depth) with an orthographic camera rig.
//! 2. [`voxelmap`] quantizes canonical coordinates into integer voxel indices
//!    at every feature resolution of the denoiser.
//! 3. [`rope3d`] turns those voxel indices into channel-pair rotations so that
//!    attention scores depend on 3D proximity rather than image position.
//! 4. [`attention`] runs the decoupled self / reference / multi-view attention
//!    block, and [`denoiser`] stacks those blocks into a small trainable
//!    multi-view denoising network.
//! 5. [`guidance`] composes the three conditional noise estimates (plain or
//!    orthogonally projected classifier-free guidance).
//! 6. [`baking`] back-projects the generated views into a UV texture and
//!    scores cross-view agreement with the local alignment distance.
//!
//! Everything is plain `f32` CPU code. Determinism is part of the contract:
//! fixed seeds reproduce datasets, training runs and samples bit-for-bit.

pub mod attention;
pub mod baking;
pub mod denoiser;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod numerics;
pub mod rope3d;
pub mod voxelmap;

pub use attention::{AttentionBlockWeights, BranchWeights, LatentGrid};
pub use error::{Error, Result};
pub use geometry::{CameraView, ConditionMaps, Mesh};
pub use guidance::{GuidanceBundle, GuidanceConfig, GuidanceMode};
pub use numerics::{Grid, RngState};
pub use rope3d::RopeConfig;
pub use voxelmap::{PhaseGrid, VoxelPyramid};
