use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A kernel or layer received a tensor whose extent along `axis` is wrong.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training or evaluation data that makes the requested quantity undefined
    /// (e.g. no positive labels for a class weight, a single class for AUROC).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("container corrupted at entry `{entry}`: {reason}")]
    Corruption { entry: String, reason: String },

    /// Encoder or head weights that do not match their configuration.
    #[error("weight validation failed for `{name}`: {reason}")]
    Weights { name: String, reason: String },

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
