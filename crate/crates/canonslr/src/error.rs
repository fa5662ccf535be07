use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the failure classes the
/// public operations are contracted to report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// CTC target cannot be aligned to the available frame count.
    #[error("infeasible target: {0}")]
    Feasibility(String),

    /// A dataset record is inconsistent (e.g. a view missing its paired
    /// frontal sample).
    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not parse.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::DataIntegrity(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Feasibility(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
