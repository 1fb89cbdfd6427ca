use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("{}:{line}: {reason}", path.display())]
    Manifest { path: PathBuf, line: usize, reason: String },

    #[error("no records in {}", .0.display())]
    NoRecords(PathBuf),

    #[error("unknown channel `{requested}`, available channels: {}", available.join(", "))]
    UnknownChannel { requested: String, available: Vec<String> },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: projection output has zero norm")]
    DegenerateEmbedding,

    #[error("degenerate fusion: image and content embeddings sum to zero")]
    DegenerateFusion,

    #[error("empty denominator: a contrastive row needs at least two samples")]
    EmptyDenominator,

    #[error("split leakage: record `{record}` belongs to unseen class `{class}`")]
    SplitLeakage { record: String, class: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("split `{name}` is invalid: {}", violations.join("; "))]
    InvalidSplit { name: String, violations: Vec<String> },

    #[error("checkpoint provenance mismatch: {0}")]
    Provenance(String),

    #[error("run directory {} is locked by another process", .0.display())]
    Locked(PathBuf),

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad configuration or input data rather
    /// than a failure while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Manifest { .. }
                | Error::NoRecords(_)
                | Error::UnknownChannel { .. }
                | Error::UnknownClass(_)
                | Error::InvalidSplit { .. }
                | Error::Config(_)
                | Error::SplitLeakage { .. }
        )
    }
}
