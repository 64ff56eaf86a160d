use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{msg} (line {line})")]
    Parse { line: usize, msg: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty tensor: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: {param} is not finite; try a smaller initial learning rate")]
    Divergence { epoch: usize, param: String },

    #[error("cannot draw {requested} distinct entries from a space of {capacity}")]
    Infeasible { requested: usize, capacity: u128 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
