use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty attention support")]
    EmptyAttentionSupport,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("stale graph: backward already ran on this tape")]
    StaleGraph,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("empty description")]
    EmptyDescription,

    #[error("item `{0}` has no fields")]
    EmptyFields(String),

    #[error("duplicate item key `{0}`")]
    DuplicateKey(String),

    #[error("duplicate field `{field}` in item `{item}`")]
    DuplicateField { item: String, field: String },

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(f64),

    #[error("cannot form marginal pairs from a batch of {0}")]
    MarginalPairs(usize),

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown field `{0}`")]
    UnknownField(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
