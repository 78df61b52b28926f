use std::path::PathBuf;

/// Errors raised anywhere in the clustering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("coordinate out of range: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown record id `{0}`")]
    UnknownId(String),

    #[error("duplicate record id `{id}` (line {line})")]
    DuplicateId { id: String, line: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {component} loss ({value})")]
    NonFinite { component: &'static str, value: f64 },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("undefined Moran's I: {0}")]
    UndefinedMoran(&'static str),

    #[error("label map does not cover cluster {0}")]
    UnmappedCluster(usize),

    #[error("record `{0}` lies outside the grid")]
    OutsideGrid(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
