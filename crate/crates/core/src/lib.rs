//! Graph classification of cortical-thickness connectomes.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! * [`graph`]: the per-subject graph object and its `ADGR` file format.
//! * [`synthgen`]: a seeded generator of synthetic cortical surfaces and the
//!   thickness-difference graphs built from them.
//! * [`model`]: GraphSAGE convolution, dense differentiable pooling and the
//!   three-level classifier, plus the `ADCK` checkpoint format.
//! * [`train`]: losses, optimizers, the training loop, evaluation and the
//!   metrics CSV.
//! * [`gradcheck`]: finite-difference verification of the full pipeline.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
