use std::path::PathBuf;

/// Crate-wide error type. Each variant maps onto one CLI exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("adapter: {0}")]
    Adapter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 config, 3 data, 4 numeric, 5 adapter.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Shape { .. } | Error::Checkpoint(_) | Error::Io { .. } => 3,
            Error::NonFinite(_) | Error::Numeric(_) => 4,
            Error::Adapter(_) => 5,
        }
    }

    /// Short machine-parsable category used in the CLI's one-line error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::Numeric(_) => "numeric",
            Error::Adapter(_) => "adapter",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}
