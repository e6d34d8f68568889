//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Tensor shapes do not conform to a primitive's rule.
    #[error("{primitive}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A primitive received an invalid attribute (stride, padding, axis...).
    #[error("{primitive}: invalid attribute: {message}")]
    InvalidAttr {
        primitive: &'static str,
        message: String,
    },

    /// A tensor constructor was handed inconsistent shape/data.
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    /// `backward` was called on a non-scalar loss.
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A tensor from one tape was used on another.
    #[error("tensor handle does not belong to this tape")]
    ForeignTape,

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Genotype text could not be parsed.
    #[error("genotype parse error at line {line}: {message}")]
    GenotypeParse { line: usize, message: String },

    /// Benchmark table lookup failed.
    #[error("genotype not in table: `{key}` (nearest canonical key: `{nearest}`)")]
    UnknownGenotype { key: String, nearest: String },

    /// Benchmark table text could not be parsed.
    #[error("bench table parse error at line {line}: {message}")]
    TableParse { line: usize, message: String },

    /// A search or evaluation was run against a table built for another space.
    #[error("spec hash mismatch: search space `{ours}` vs table `{table}`")]
    SpecHashMismatch { ours: String, table: String },

    /// Anything with operator-facing context attached.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with additional context (epoch/step, file, ...).
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
