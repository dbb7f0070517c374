//! Self-supervised representation learning on point maps.
//!
//! A point map is an H×W grid whose pixels store world-frame 3D coordinates,
//! built from a depth map and a pinhole camera. This crate provides the full
//! desk-scale stack around that idea:
//!
//! - [`geometry`]: unprojection/projection, view merging, normalization,
//!   voxel coverage, and the `POMA` point-map binary format.
//! - [`dataset`]: procedural box-room scenes, ray-traced depth rendering,
//!   maximum-coverage view selection, caption templates, and a deterministic
//!   hashing text embedder.
//! - [`masking`]: per-view rectangular block masks and the masked/visible
//!   patch partition.
//! - [`encoder`]: a small token-mixing encoder over point-map patches with
//!   low-rank adapters, an EMA target encoder, and a masked-patch predictor.
//! - [`losses`]: symmetric InfoNCE alignment losses, the Chamfer
//!   masked-embedding loss, its MSE ablation, and stage totals.
//! - [`trainer`]: AdamW, warmup+cosine schedule, the two-stage training
//!   loop, gradient checking, and checkpoints.
//! - [`retrieval`]: scene/view embedding indices, recall@N evaluation, and
//!   view localization.
//!
//! All randomness is seeded and all file formats round-trip bit-exactly, so
//! every pipeline stage is reproducible byte-for-byte.

pub mod codec;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod masking;
pub mod mat;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
