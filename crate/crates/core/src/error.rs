use std::path::PathBuf;

/// Errors raised across the toolkit. Each variant maps to one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent configuration.
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },
    /// Invalid caller-supplied data (shapes, labels, kernel sizes).
    #[error("input error: {0}")]
    Input(String),
    /// Missing or inconsistent model, registry entry or weight blob.
    #[error("model error: {0}")]
    Model(String),
    /// Dataset manifest problems, reported with the offending row.
    #[error("dataset error{}: {msg}", .row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Dataset { row: Option<usize>, msg: String },
    /// A numerical failure during an attack (non-finite loss and similar).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Evaluation failed for at least one matrix cell.
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// A caller broke an internal contract.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 model/registry, 4 evaluation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Model(_) => 3,
            Error::Evaluation(_) | Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
