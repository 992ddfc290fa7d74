//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two fields that must share a shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A scalar argument fell outside its documented range.
    #[error("out of range: {0}")]
    Range(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A configuration failed validation before any work started.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An annotation lies outside the image bounds.
    #[error("annotation out of bounds: {0}")]
    OutOfBounds(String),

    /// Sparsification was asked to operate on an empty annotation set.
    #[error("empty annotation set")]
    EmptyAnnotations,

    /// A sparsification plan is internally inconsistent.
    #[error("invalid sparsification plan: {0}")]
    InvalidPlan(String),

    /// The scene generator could not place all cells.
    #[error("packing failed: could not place cell {cell} within {attempts} attempts")]
    Packing { cell: usize, attempts: usize },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    /// An operation that needs at least one example received none.
    #[error("empty dataset")]
    EmptyDataset,

    /// A file did not conform to its expected on-disk format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
