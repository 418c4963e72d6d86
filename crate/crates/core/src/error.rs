use std::path::PathBuf;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A corpus or vector file line that could not be parsed.
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },

    /// A document that violates a structural requirement.
    #[error("document {id}: {message}")]
    Document { id: String, message: String },

    /// Tensor operands whose shapes do not fit the requested operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A non-finite value where one is never allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Invalid configuration value or key.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint files that cannot be read back.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Anything that makes training or evaluation impossible.
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn line(line: usize, message: impl Into<String>) -> Self {
        Error::Line {
            line,
            message: message.into(),
        }
    }

    pub fn document(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Document {
            id: id.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
