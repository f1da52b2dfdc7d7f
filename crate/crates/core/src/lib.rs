//! Two-stage LiDAR 3D object detection with point-of-interest refinement.

// `!(x >= 0.0)` style checks are kept because they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod infofocus;
pub mod kernels;
pub mod pillars;
pub mod pipeline;
pub mod rng;
pub mod rpn;
pub mod synth;
pub mod targets;

pub use error::{Error, Result};
