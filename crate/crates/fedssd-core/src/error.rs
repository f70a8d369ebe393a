//! Error type shared by all simulator modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch at layer {layer}: expected input width {expected}, got {actual}")]
    LayerDimMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss spec requires a teacher model but none was supplied")]
    MissingTeacher,

    #[error("class {class} has {available} samples, need {needed}")]
    InsufficientClassSamples {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("partition infeasible: {0}")]
    PartitionInfeasible(String),

    #[error("partitioning left client {client} empty after {attempts} reshuffle attempts")]
    EmptyClient { client: usize, attempts: usize },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, got {actual:#010x}")]
    IdxBadMagic {
        path: String,
        expected: u32,
        actual: u32,
    },

    #[error("truncated IDX file {path}: {detail}")]
    IdxTruncated { path: String, detail: String },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("round {round}, client {client}: {source}")]
    ClientContext {
        round: usize,
        client: usize,
        #[source]
        source: Box<CoreError>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn with_client(self, round: usize, client: usize) -> Self {
        CoreError::ClientContext {
            round,
            client,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
