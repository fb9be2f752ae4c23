use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A graph, shape, or block layout does not line up.
    #[error("structural error: {0}")]
    Structural(String),
    /// A value became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An operation was called in the wrong order.
    #[error("state error: {0}")]
    State(String),
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A 3D point is behind (or too close to) the camera.
    #[error("point is behind the camera (camera-space depth {0})")]
    BehindCamera(f64),
    /// A lookup position falls outside the raster.
    #[error("position ({0}, {1}) is out of bounds")]
    OutOfBounds(f64, f64),
    /// Incompatible or missing configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Training loss blew up.
    #[error("divergence at epoch {epoch}, step {step}: loss {loss} exceeds {limit}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
        limit: f64,
    },
    /// Malformed file contents.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
