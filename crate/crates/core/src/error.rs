use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("probability series has no mass to normalize")]
    EmptyDistribution,

    #[error("every anchor in the batch is ignored")]
    NoLabeledAnchors,

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("anchor grid is empty after clipping")]
    EmptyGrid,

    #[error("training diverged at epoch {epoch}, iteration {iter}: {reason}")]
    Diverged { epoch: usize, iter: usize, reason: String },

    #[error("unknown class `{name}` in {context}")]
    UnknownClass { name: String, context: String },

    #[error("class set mismatch: model has {model:?}, dataset has {dataset:?}")]
    ClassMismatch { model: Vec<String>, dataset: Vec<String> },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { what: what.into(), detail: detail.into() }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidBox { .. } => "invalid_box",
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::EmptyDistribution => "empty_distribution",
            Error::NoLabeledAnchors => "no_labeled_anchors",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::EmptyGrid => "empty_grid",
            Error::Diverged { .. } => "diverged",
            Error::UnknownClass { .. } => "unknown_class",
            Error::ClassMismatch { .. } => "class_mismatch",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
