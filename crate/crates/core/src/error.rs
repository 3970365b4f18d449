use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("lora wiring error: adapter targets `{adapter}` but layer is `{layer}`")]
    Wiring { adapter: String, layer: String },

    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),

    #[error("sampling error for class {class_id}: {reason}")]
    Sampling { class_id: u32, reason: String },

    #[error("ingestion error at {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
