use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A file does not follow its declared format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// Training failure inside an ensemble, annotated with the member index.
    #[error("member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    /// Failure inside one grid cell.
    #[error("cell (method {method}, rung {rung}, arch {arch}): {source}")]
    Cell {
        method: String,
        rung: usize,
        arch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
