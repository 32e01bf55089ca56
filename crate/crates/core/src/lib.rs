//! Two-stage context-aware shadow removal.
//!
//! The pipeline discovers shadow/non-shadow patch correspondences with a
//! learned dual-head matcher (`cpm`), transfers non-shadow context into
//! shadow regions in feature space with Gaussian-sampled top-k blending
//! (`cft`), and reconstructs a shadow-free image with a two-stage network
//! (`net`). Training, checkpointing and region-masked evaluation live in
//! `training` and `eval`; `imaging` and `dataset` hold the raster and
//! corpus plumbing. All numerics are `f64` on CPU and deterministic under
//! a fixed seed.

pub mod cft;
pub mod checkpoint;
pub mod cpm;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod imaging;
pub mod net;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
