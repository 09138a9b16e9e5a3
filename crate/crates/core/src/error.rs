use std::io;

use thiserror::Error;

use crate::ingest::ProbeAngle;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stream corruption: encoder position {position_um} um does not exceed previous {previous_um} um")]
    StreamCorruption { position_um: u64, previous_um: u64 },

    #[error("data corruption: {0}")]
    DataCorruption(String),

    #[error("fusion group G{group} requires a {angle} channel, which is missing")]
    MissingAngle { group: u8, angle: ProbeAngle },

    #[error("window extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training dataset is empty")]
    EmptyDataset,

    #[error("label {label} is not in the class set of G{group}")]
    LabelOutsideClassSet { group: u8, label: String },

    #[error("model format: {0}")]
    ModelFormat(String),

    #[error("class order mismatch for G{group}: expected [{expected}], found [{found}]")]
    ClassOrderMismatch {
        group: u8,
        expected: String,
        found: String,
    },

    #[error("truncated blob {path}: expected {expected} bytes, found {actual}")]
    TruncatedBlob {
        path: String,
        expected: u64,
        actual: u64,
    },

    #[error("file format: {0}")]
    Format(String),

    #[error("decision {0} not found")]
    NotFound(u64),

    #[error("decision {0} is already labeled")]
    AlreadyLabeled(u64),

    #[error("decision {0} is already queued")]
    AlreadyQueued(u64),

    #[error("decision {0} is not delegated")]
    NotDelegated(u64),

    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::StreamCorruption { .. } => "stream_corruption",
            Error::DataCorruption(_) => "data_corruption",
            Error::MissingAngle { .. } => "missing_angle",
            Error::ExtentMismatch(_) => "extent_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyDataset => "empty_dataset",
            Error::LabelOutsideClassSet { .. } => "label_outside_class_set",
            Error::ModelFormat(_) => "model_format",
            Error::ClassOrderMismatch { .. } => "class_order_mismatch",
            Error::TruncatedBlob { .. } => "truncated_blob",
            Error::Format(_) => "format",
            Error::NotFound(_) => "not_found",
            Error::AlreadyLabeled(_) => "conflict",
            Error::AlreadyQueued(_) => "conflict",
            Error::NotDelegated(_) => "not_delegated",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
