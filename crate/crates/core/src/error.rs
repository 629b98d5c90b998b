use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by `{node}`")]
    NonFinite { node: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("world generation failed for seed {seed} after {attempts} attempts")]
    WorldGeneration { seed: u64, attempts: usize },

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("optimizer diverged: {0}")]
    Diverged(String),

    #[error("checkpoint rejected: {field}: {detail}")]
    Checkpoint { field: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
