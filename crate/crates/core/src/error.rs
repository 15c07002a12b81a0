//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("matmul dimension mismatch: [{m}x{k}] . [{k2}x{n}]")]
    MatmulDims { m: usize, k: usize, k2: usize, n: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("p-norm order must be >= 1, got {0}")]
    NormOrder(f64),

    #[error("class count must be >= 2, got {0}")]
    ClassCount(usize),

    #[error("zero-norm row {0}: direction undefined")]
    ZeroNormRow(usize),

    #[error("logit at index {index} is {value}; bound requires strictly positive components")]
    NonPositiveLogit { index: usize, value: f64 },

    #[error("logsumexp of logits is {0}; uncertainty K/LSE requires LSE > 0")]
    NonPositiveLse(f64),

    #[error("confidence bound undefined for u0={u0}, delta={delta} (requires u0 - delta > 0)")]
    BoundPrecondition { u0: f64, delta: f64 },

    #[error("label {label} at row {row} out of range for {classes} classes")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },

    #[error("class-mean separation unachievable after {attempts} iterations; try a larger feature dim than {dim}")]
    SeparationUnachievable { attempts: usize, dim: usize },

    #[error("adaptation collapsed at step {step}: {reason}")]
    Collapse { step: usize, reason: String },

    #[error("pretraining diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("no in-distribution rows to score")]
    NoInDistribution,

    #[error("both a positive and a negative sample are required, got {positives} positives / {negatives} negatives")]
    EmptyClass { positives: usize, negatives: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
