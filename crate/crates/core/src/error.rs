use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error between `{producer}` and `{consumer}`: {detail}")]
    Shape {
        producer: String,
        consumer: String,
        detail: String,
    },

    #[error("structure error at `{layer}`: {detail}")]
    Structure { layer: String, detail: String },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("plan mismatch: plan was built for graph {expected}, got {actual}")]
    PlanMismatch { expected: String, actual: String },

    #[error("invalid plan for `{layer}`: {detail}")]
    InvalidPlan { layer: String, detail: String },

    #[error("dataset error in {file} (record {record}): {detail}", file = .file.display())]
    Dataset {
        file: PathBuf,
        record: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn structure(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Structure {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::Dataset { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
