use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    /// Dataset or checkpoint does not fit the requested model or task shape.
    #[error("{0}")]
    Data(String),
    #[error("{}: format error at byte {offset}: {detail}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ustep_core::Error),
    #[error("model `{model}`: {source}")]
    Model {
        model: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit status: 2 usage/config, 3 data/shape/format, 4 I/O,
    /// 1 anything else (e.g. divergence).
    pub fn exit_code(&self) -> i32 {
        use ustep_core::Error as Core;
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Core(Core::Config(_)) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Core(Core::Dimension { .. } | Core::Contract(_)) => 3,
            Error::Io { .. } => 4,
            Error::Core(_) => 1,
            Error::Model { source, .. } => source.exit_code(),
        }
    }
}
