use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("element {index} = {value} does not fit in {bits} magnitude bits")]
    Range { index: usize, value: i64, bits: u32 },

    #[error("training diverged at {stage}: loss = {loss}")]
    Diverged { stage: String, loss: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),
}

impl Error {
    pub(crate) fn layer(layer: usize, msg: impl Into<String>) -> Self {
        Error::Layer { layer, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
