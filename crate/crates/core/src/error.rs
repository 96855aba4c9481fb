use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// A container or table file did not match its declared layout.
    #[error("format error in `{field}`: {detail}")]
    Format { field: &'static str, detail: String },
    /// Invalid configuration, rejected before any work starts.
    #[error("config error: {0}")]
    Config(String),
    /// Input data is missing or inconsistent.
    #[error("data error: {0}")]
    Data(String),
    /// Tensor shapes disagree.
    #[error("shape error: {0}")]
    Shape(String),
    /// Training diverged.
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { field, detail: detail.into() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
