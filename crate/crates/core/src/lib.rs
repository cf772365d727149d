//! Reflection-aware self-supervised depth optimization.
//!
//! The crate optimizes per-pixel depth grids against multi-view photometric
//! objectives on synthetic scenes whose ground truth (surface depth and the
//! mirror region) is known by construction:
//!
//! * [`diffcore`]: a small reverse-mode differentiation tape over image ops.
//! * [`geometry`]: pinhole intrinsics, rigid poses and warp fields.
//! * [`photometric`]: bilinear view synthesis, SSIM, photometric error, auto-mask.
//! * [`reflection`]: cross-view error pair, adaptive margin, reflective mask and
//!   the triplet mining loss.
//! * [`distill`]: two-teacher pseudo-depth fusion and the log-depth distillation loss.
//! * [`synthscene`]: the synthetic plane-and-mirror scene generator.
//! * [`trainer`]: depth-grid models and the optimization loops.
//! * [`metrics`]: standard depth metrics, region splits and mask IoU.
//! * [`io`]: PFM/PPM/PGM images and JSON manifests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod photometric;
pub mod reflection;
pub mod report;
pub mod selfcheck;
pub mod synthscene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};

/// Nearest depth, in meters, that models produce and evaluation considers.
pub const DEPTH_MIN: f64 = 0.1;
/// Farthest depth, in meters.
pub const DEPTH_MAX: f64 = 10.0;
