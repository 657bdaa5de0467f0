//! Reverse-mode autodiff over dense f64 tensors and the sparse network blocks
//! built on it: window attention, submanifold convolution and toy models.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod autodiff;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod models;
pub mod params;
pub mod pipeline;

pub use attention::{AttentionConfig, DualBranchBlock, WindowMhsa};
pub use autodiff::{Graph, Tensor, Var};
pub use conv::{Rulebook, SubmConv};
pub use error::{NnError, Result};
pub use losses::LossWeights;
pub use params::{Bound, ParamId, ParamStore, Sgd};
pub use models::{ModelConfig, Network};
