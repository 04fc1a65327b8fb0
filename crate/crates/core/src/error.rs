use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, out-of-range hyperparameters, inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a precondition (negative linear-scale value, NaN, orphan ids).
    #[error("data error: {0}")]
    Data(String),

    /// A row reached l2 normalization with (near) zero norm.
    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("AUROC undefined: {0}")]
    UndefinedAuroc(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("leakage audit failed: {0}")]
    Audit(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: u64,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
