//! Minimal reverse-mode autodiff over `f64` ndarrays, plus the layer and
//! optimizer plumbing used by the matcher and removal networks.
//!
//! Everything runs eagerly on a [`Tape`]: each op computes its value on
//! insertion and records enough to replay the chain rule in reverse. The
//! engine is single-threaded and allocation-order deterministic, which is
//! what makes the seeded-run reproducibility contract cheap to honor.

mod adam;
mod layers;
mod tape;

pub use adam::Adam;
pub use layers::{
    he_normal, Conv2dLayer, DenseBlock, LinearLayer, ResBlock, TapeVars, VarStore,
};
pub use tape::{softmax_rows, Arr, CustomOp, NodeId, Tape};
