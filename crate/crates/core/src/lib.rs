//! Learned explicit MPC: condensing, the QP-layer network, training,
//! explicit piecewise-affine export and the multicell converter study.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod serde_util;

pub mod converter;
pub mod dataset;
pub mod invariant;
pub mod mpc;
pub mod pwa;
pub mod qpnet;
pub mod training;

pub use error::{Error, Result};
