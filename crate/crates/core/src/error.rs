use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("empty domain: no voxel is flagged inside the physical domain")]
    EmptyDomain,

    #[error("point {point:?} lies outside the domain {what}")]
    OutsideDomain { point: [f64; 3], what: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("linear solver failed: {0}")]
    LinearSolver(String),

    #[error("step {step} (applied displacement {applied:.6e} mm): {source}")]
    Step {
        step: usize,
        applied: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Postproc(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
