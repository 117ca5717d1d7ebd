use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error in {head}: {reason}")]
    Numeric { head: String, reason: String },
    #[error("capability error: {0}")]
    Capability(String),
    #[error("data error: {reason} (ids: {})", ids.join(", "))]
    Data { reason: String, ids: Vec<String> },
    #[error("training error: {0}")]
    Training(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("guard violation: {0}")]
    Guard(String),
    #[error("refusing to touch existing output {0}; pass --resume or --overwrite")]
    Exists(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 for user-facing domain and configuration problems,
    /// 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Split(_)
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::Capability(_)
            | Error::Data { .. }
            | Error::Schedule(_)
            | Error::Exists(_) => 1,
            Error::Numeric { .. } | Error::Training(_) | Error::Guard(_) | Error::Io { .. } | Error::Format(_) => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
