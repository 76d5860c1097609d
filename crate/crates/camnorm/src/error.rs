use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("empty group in {what}")]
    EmptyGroup { what: &'static str },
    #[error("camera {camera} forms a singleton group in a train-mode batch")]
    SingletonCamera { camera: u32 },
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("data integrity: {0}")]
    DataIntegrity(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no statistics for norm layer {layer}, camera {camera}")]
    StatsMissing { layer: usize, camera: u32 },
    #[error("camera {camera} has no samples to estimate from")]
    MissingCamera { camera: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by malformed configuration or input schemas,
    /// as opposed to contract violations or I/O failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Schema(_) | Error::Parse { .. }
        )
    }
}
