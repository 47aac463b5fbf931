use std::io;
use std::path::PathBuf;

use crate::bbox::GeometryError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: malformed JSON: {source}", path.display())]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("annotation {annotation_id} references missing image id {image_id}")]
    DanglingImage { annotation_id: u64, image_id: u64 },

    #[error("annotation {annotation_id} references missing category id {category_id}")]
    DanglingCategory { annotation_id: u64, category_id: u64 },

    #[error("prediction #{index} references missing image id {image_id}")]
    DanglingPredictionImage { index: usize, image_id: u64 },

    #[error("prediction #{index} references missing category id {category_id}")]
    DanglingPredictionCategory { index: usize, category_id: u64 },

    #[error("annotation {annotation_id}: {source}")]
    AnnotationGeometry {
        annotation_id: u64,
        source: GeometryError,
    },

    #[error("prediction #{index}: {source}")]
    PredictionGeometry { index: usize, source: GeometryError },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },

    #[error("invalid {field}: {message}")]
    InvalidValue { field: &'static str, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Detect(#[from] crate::detector::DetectError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidValue { .. })
    }
}

impl From<GeometryError> for Error {
    fn from(e: GeometryError) -> Self {
        Error::InvalidValue {
            field: "box",
            message: e.to_string(),
        }
    }
}
