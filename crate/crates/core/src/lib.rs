//! Bias-conflicting slice discovery: synthetic data generation, bias
//! amplification through weight-decayed training, correlation-aware
//! slicing with a dual-view mixture model, and evaluation metrics.
//!
//! The crate is `no_std` (with `alloc`); file formats, the command line and
//! threading live in the `facts` companion crate.

#![cfg_attr(not(test), no_std)]
// Negated comparisons deliberately treat NaN as invalid input; index loops
// mirror the matrix formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod amplify;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod seed;
pub mod slicing;
pub mod synth;

pub use error::{Error, Result};
