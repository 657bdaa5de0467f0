//! Command-line front end for the sparse-voxel pose pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod commands;
pub mod config;
pub mod error;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
