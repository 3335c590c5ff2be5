//! Partially personalized federated learning on synthetic objectives whose
//! parameters split into a shared block and per-device personal blocks.

// Errors from training runs carry the partial traces and state on purpose,
// and comparisons are written `!(x >= 0.0)` so that NaN is rejected.
#![allow(clippy::result_large_err, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod federation;
pub mod objective;
pub mod problems;
pub mod sampling;
pub mod solvers;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
