use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not match its declared layout. `field` names the offending part.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("duplicate {kind}: {name}")]
    Duplicate { kind: &'static str, name: String },

    #[error("utterance {id}: {message}")]
    Utterance { id: String, message: String },

    #[error("symbol table mismatch: {0}")]
    SymbolMismatch(String),

    /// Target needs more frames than the grid provides.
    #[error("infeasible CTC target: needs {needed} frames, have {frames}")]
    Infeasible { needed: usize, frames: usize },

    #[error("search failed: {0}")]
    SearchFailed(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn utterance(id: impl Into<String>, message: impl ToString) -> Self {
        Error::Utterance {
            id: id.into(),
            message: message.to_string(),
        }
    }
}
