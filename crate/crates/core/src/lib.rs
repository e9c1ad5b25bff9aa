//! Heatmap-based anatomical landmark localization with an implicit-topology
//! auxiliary task, trained end to end on CPU.

// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apps;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod kernels;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
