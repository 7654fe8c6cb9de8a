use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class sizes too small to realize correlation {requested}: attribute {attribute} realizes {realized:.4}")]
    InsufficientCounts {
        attribute: usize,
        requested: f64,
        realized: f64,
    },

    #[error("undefined correlation: attribute {0} has no carriers")]
    UndefinedCorrelation(usize),

    #[error("missing annotations: {0}")]
    MissingAnnotations(&'static str),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("need at least two classes, found {0}")]
    SingleClass(usize),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("non-finite log-likelihood at EM iteration {0}")]
    NonFiniteLikelihood(usize),

    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("every run failed: {}", .0.join("; "))]
    AllFailed(Vec<String>),
}
