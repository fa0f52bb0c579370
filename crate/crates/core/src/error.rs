use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition or argument constraint was violated.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config key `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    #[error("environment error: {0}")]
    Env(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("failed to decode record: {0}")]
    Decode(#[from] serde_json::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run aborted at iteration {iteration}: {source}")]
    RunAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
