use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: [{lo}, {hi}] is empty or degenerate")]
    InvalidDomain { lo: f64, hi: f64 },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {block}: {detail}")]
    NonFinite { block: &'static str, detail: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Length { needed: u64, found: u64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("requested {requested} rows but only {available} available")]
    Size { requested: usize, available: usize },

    #[error("operation requires {expected} mode")]
    Mode { expected: &'static str },

    #[error("region does not intersect the grid")]
    Region,

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("invalid map: {0}")]
    InvalidMap(&'static str),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("fit error: {0}")]
    Fit(&'static str),

    #[error("degenerate distribution: {0}")]
    Degenerate(&'static str),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
