use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid box at index {index}: {reason}")]
    InvalidBox { index: usize, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("duplicate category name {0:?} (names are compared case-folded)")]
    DuplicateCategory(String),

    #[error("malformed prompt template {0:?}: expected exactly one `{{}}` placeholder")]
    Template(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("annotation {annotation} references unknown {what} id {id}")]
    Referential {
        annotation: usize,
        what: &'static str,
        id: String,
    },

    #[error("unsupported container version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{what} index {index} out of range (must be < {limit})")]
    Range {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("non-finite loss at iteration {iteration} on batch {batch_id}; batch dump: {dump}")]
    NonFiniteLoss {
        iteration: u64,
        batch_id: String,
        dump: String,
    },

    #[error("prediction {index} on image {image_id:?} does not coincide with any ground-truth box")]
    UnmatchedPrediction { index: usize, image_id: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
