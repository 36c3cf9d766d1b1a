//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across the crate.
///
/// Errors split into two broad categories used by the CLI for exit codes:
/// [`Error::is_input_error`] distinguishes bad user input (exit code 2)
/// from numerical/estimation failures (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty file: {path}")]
    EmptyFile { path: String },

    #[error("unknown column `{column}`")]
    UnknownColumn { column: String },

    #[error("duplicate column name `{column}`")]
    DuplicateColumn { column: String },

    #[error("non-binary value `{value}` in column `{column}`, row {row}")]
    NonBinaryValue {
        column: String,
        row: usize,
        value: String,
    },

    #[error("unreadable number `{value}` in column `{column}`, row {row}")]
    InvalidNumber {
        column: String,
        row: usize,
        value: String,
    },

    #[error("no indicator columns in schema")]
    NoIndicators,

    #[error("no rows survived validation")]
    NoRows,

    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("invalid configuration: {context}")]
    InvalidConfig { context: String },

    #[error("k = {k} exceeds the number of observations n = {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("invalid parameters: {context}")]
    InvalidParams { context: String },

    #[error("degenerate class: class {class} has zero posterior mass")]
    DegenerateClass { class: usize },

    #[error("all {attempted} starts failed: {detail}")]
    AllStartsFailed { attempted: usize, detail: String },

    #[error("singular matrix in {context}")]
    SingularMatrix { context: String },

    #[error("{context}")]
    Unsupported { context: String },
}

impl Error {
    /// True when the error is the caller's fault (malformed input, bad
    /// configuration) rather than a numerical failure during estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::EmptyFile { .. }
                | Error::UnknownColumn { .. }
                | Error::DuplicateColumn { .. }
                | Error::NonBinaryValue { .. }
                | Error::InvalidNumber { .. }
                | Error::NoIndicators
                | Error::NoRows
                | Error::LengthMismatch { .. }
                | Error::DimensionMismatch { .. }
                | Error::InvalidConfig { .. }
                | Error::KTooLarge { .. }
                | Error::InvalidParams { .. }
                | Error::Unsupported { .. }
        )
    }
}
