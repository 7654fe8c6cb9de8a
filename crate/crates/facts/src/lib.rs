//! File formats, stage orchestration and command line for bias-conflicting
//! slice discovery. The algorithms live in `facts_core`.

pub mod artifacts;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
