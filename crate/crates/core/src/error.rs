use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("need at least {needed} inputs, got {got}")]
    TooFewInputs { needed: usize, got: usize },

    #[error("need at least 2 images per set, got {0}")]
    TooFewImages(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("missing probe features: {}", .0.join(", "))]
    MissingProbeFeatures(Vec<String>),

    #[error("no cached residual for block {block}, step {step}")]
    CacheMiss { block: usize, step: usize },

    #[error("unsupported dtype {0:?}; only '<f4' is accepted")]
    UnsupportedDtype(String),

    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),

    #[error("malformed npy header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("invariant violated ({rule}): {detail}")]
    InvariantViolation { rule: &'static str, detail: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::Shape(_) => "ShapeError",
            Error::DegenerateVector(_) => "DegenerateVector",
            Error::ManifestMismatch(_) => "ManifestMismatch",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::TooFewInputs { .. } => "TooFewInputs",
            Error::TooFewImages(_) => "TooFewImages",
            Error::EmptyInput(_) => "EmptyInput",
            Error::MissingProbeFeatures(_) => "MissingProbeFeatures",
            Error::CacheMiss { .. } => "CacheMiss",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::UnsupportedLayout(_) => "UnsupportedLayout",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::Schema { .. } => "SchemaError",
            Error::InvariantViolation { .. } => "InvariantViolation",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(rule: &'static str, detail: impl Into<String>) -> Self {
        Error::InvariantViolation {
            rule,
            detail: detail.into(),
        }
    }
}
