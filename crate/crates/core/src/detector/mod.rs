//! Detector backends.
//!
//! A backend receives one region of one image together with the width the
//! region is resized to, and answers with detections in resized-region
//! coordinates. Converting back to image coordinates is the pipeline's job.

use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::coco::Detection;

mod external;
mod oracle;
mod replay;

pub use external::{ExternalConfig, ExternalDetector, ExternalStats, Handshake, WireDetection, WireRequest, WireResponse, PROTOCOL_NAME, PROTOCOL_VERSION};
pub use oracle::{oracle_detect, OracleDetector, VisibilityModel};
pub use replay::{replay_key, RecordingDetector, ReplayDetector, ReplayStore};

/// Image pixels handed to a backend.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Pixels(Arc<image::RgbImage>),
}

impl ImageRef {
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            ImageRef::Path(p) => Some(p),
            ImageRef::Pixels(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectRequest {
    pub request_id: u64,
    pub image_id: u64,
    pub image: ImageRef,
    /// Region of the original image, in original pixels.
    pub region: BBox,
    /// Width the region is resized to (aspect preserved) before detection.
    pub target_width: u32,
}

impl DetectRequest {
    pub fn scale(&self) -> f64 {
        f64::from(self.target_width) / self.region.width()
    }

    /// `(width, height)` of the resized region.
    pub fn resized_extent(&self) -> (f64, f64) {
        (
            f64::from(self.target_width),
            self.region.height() * self.scale(),
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("no stored detections for key {0}")]
    MissingReplayKey(String),

    #[error("replay store {}: {message}", path.display())]
    ReplayStore { path: PathBuf, message: String },

    #[error("failed to start detector `{command}`: {source}")]
    Spawn { command: String, source: io::Error },

    #[error("detector `{command}` exited or closed its output: {message}")]
    Exited { command: String, message: String },

    #[error("detector `{command}` sent a malformed line ({message}): {line}")]
    Protocol {
        command: String,
        line: String,
        message: String,
    },

    #[error("detector `{command}` did not answer within {secs} s")]
    Timeout { command: String, secs: u64 },

    #[error("detector `{command}` cannot take in-memory images; pass a file path")]
    NeedsPath { command: String },
}

/// The detection interface every backend implements.
///
/// Implementations must be stateless across requests: the same request
/// always yields the same response.
pub trait Detector: Send + Sync {
    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, DetectError>;
}

impl<D: Detector + ?Sized> Detector for &D {
    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, DetectError> {
        (**self).detect(request)
    }
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, DetectError> {
        (**self).detect(request)
    }
}

/// Detection as stored in replay files and sent over the wire protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDetection {
    pub bbox: [f64; 4],
    pub score: f64,
    pub category_id: u64,
}
