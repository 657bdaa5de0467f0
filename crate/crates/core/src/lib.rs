//! Sparse multi-view depth fusion and per-voxel voting for 6D object pose estimation.
//!
//! The numerical core is generic over the scalar type (`f32` / `f64`) through
//! [`Real`]; the aliases below fix the common double-precision instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod fusion;
pub mod ground_truth;
pub mod heatmap;
pub mod ply;
pub mod pose;
pub mod scalar;
pub mod spatial;
pub mod synth;
pub mod tsdf;
pub mod voxel;

pub use error::{Error, Result};
pub use linalg::{Mat3, Rigid, Vec3};
pub use scalar::Real;

pub type Vec3d = Vec3<f64>;
pub type Vec3f = Vec3<f32>;
pub type Mat3d = Mat3<f64>;
pub type Mat3f = Mat3<f32>;
pub type Rigidd = Rigid<f64>;
pub type Rigidf = Rigid<f32>;
