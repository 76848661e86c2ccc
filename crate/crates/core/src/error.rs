use std::io;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncation { expected: usize, found: usize },
    #[error("value {value} outside the Hounsfield range [-1024, 3071] at voxel {index}")]
    Range { index: usize, value: f32 },
    #[error("probabilities at voxel {index} sum to {sum}")]
    Normalization { index: usize, sum: f64 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate window: lower and upper bound both equal {0}")]
    DegenerateWindow(f64),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("training-mode slice selection found no foreground slice")]
    NoForeground,
    #[error("refusing to upsample: target {target} exceeds in-plane size {size}")]
    UpsampleRefused { target: usize, size: usize },
    #[error("too few slices: {0}")]
    TooFewSlices(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unit state mismatch: expected {expected}, found {found}")]
    UnitState { expected: &'static str, found: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("fold error: {0}")]
    Fold(String),
    #[error("weight error: {0}")]
    Weight(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("infeasible phantom geometry: {0}")]
    Geometry(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(offset: u64, source: io::Error) -> Self {
        Error::Io { offset, source }
    }
}
