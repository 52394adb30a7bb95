//! One error type for the whole crate.
//!
//! The CLI maps these onto its exit-code contract: validation/usage errors
//! exit 2, I/O errors exit 3, numerical aborts exit 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/op shape disagreement. `op` names the operation, `detail` the
    /// offending dimensions.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// A config field failed validation. Carries the field name per contract.
    #[error("invalid config field `{field}`: {detail}")]
    InvalidConfig { field: String, detail: String },

    /// Fixed-resolution family fed a different resolution than it was built
    /// for. A deliberate, testable error; flexible families never raise it.
    #[error("resolution mismatch: model expects {expected}, got {got}")]
    ResolutionMismatch { expected: String, got: String },

    /// Non-finite value where training must stop. Aborting beats silently
    /// training on garbage.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{what} is empty")]
    Empty { what: String },

    /// Dataset folder layout violation (unknown magnification dir, empty
    /// class, unreadable file, ...).
    #[error("dataset layout: {detail}")]
    DataLayout { detail: String },

    #[error("checkpoint: {detail}")]
    Checkpoint { detail: String },

    #[error("matrix for `{arch}` is incomplete: {missing} missing cells")]
    IncompleteMatrix { arch: String, missing: usize },

    /// A matrix cell failed; carries which one, preserving the underlying
    /// error's exit-code class.
    #[error("{arch} trained on {train_mag}: {source}")]
    Cell {
        arch: String,
        train_mag: String,
        #[source]
        source: Box<Error>,
    },

    /// Summaries computed on different dataset snapshots must not be compared.
    #[error("dataset snapshot mismatch: {a} vs {b}")]
    SnapshotMismatch { a: String, b: String },

    #[error("unknown report format `{got}` (expected csv, md, svg, or all)")]
    UnknownFormat { got: String },

    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image file {path}: {detail}")]
    Image { path: String, detail: String },
}

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op: op.into(), detail: detail.into() }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code for the CLI contract: 2 usage/validation, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 4,
            Error::Io { .. } | Error::Json { .. } | Error::Image { .. } => 3,
            Error::Cell { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
