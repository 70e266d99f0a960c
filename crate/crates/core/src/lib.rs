//! Perceptual importance maps for region-of-interest video rate control.
//!
//! The crate turns per-pixel importance maps into bitrate-neutral macroblock
//! ΔQP maps. It also computes per-macroblock features and trains a small
//! residual CNN that predicts three-level importance from them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod encode;
pub mod error;
pub mod features;
pub mod gridmap;
pub mod media;
pub mod metrics;
pub mod pimm;
pub mod qpsolver;

pub use error::{Error, Result};
pub use gridmap::{ClassGrid, ImportanceClass, MacroblockGrid};
pub use media::{ChromaSubsampling, DqpSidecar, FeatureTensor, Frame, ImportanceMap, VideoSequence};
pub use qpsolver::{DeltaQpGrid, SolveReport, SolverConfig};

/// Macroblock edge length in pixels.
pub const MB_SIZE: usize = 16;

/// Smallest ΔQP a sidecar may carry.
pub const DQP_MIN: i8 = -10;
/// Largest ΔQP a sidecar may carry.
pub const DQP_MAX: i8 = 10;

/// Encoder QP range.
pub const QP_MIN: i32 = 0;
pub const QP_MAX: i32 = 51;
