use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use log::warn;

use super::{DetectError, DetectRequest, Detector, StoredDetection};
use crate::bbox::BBox;
use crate::coco::{write_text, Detection, DetectionSource};
use crate::error::{Error, Result};

/// Store key `"imageId:x0:y0:x1:y1:tw"`.
pub fn replay_key(request: &DetectRequest) -> String {
    let r = request.region;
    format!(
        "{}:{}:{}:{}:{}:{}",
        request.image_id,
        r.x_min(),
        r.y_min(),
        r.x_max(),
        r.y_max(),
        request.target_width
    )
}

/// Recorded backend answers, keyed by [`replay_key`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayStore {
    pub entries: BTreeMap<String, Vec<StoredDetection>>,
}

impl ReplayStore {
    pub fn from_json_str(text: &str) -> std::result::Result<Self, String> {
        let entries: BTreeMap<String, Vec<StoredDetection>> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        for (key, dets) in &entries {
            for d in dets {
                BBox::try_from(d.bbox).map_err(|e| format!("{key}: {e}"))?;
                if !(0.0..=1.0).contains(&d.score) {
                    return Err(format!("{key}: score {} outside [0, 1]", d.score));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|message| {
            DetectError::ReplayStore {
                path: path.to_path_buf(),
                message,
            }
            .into()
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string(&self.entries).expect("store serialization is infallible");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json_string())
    }
}

/// Answers requests from a [`ReplayStore`].
pub struct ReplayDetector {
    store: ReplayStore,
    strict: bool,
}

impl ReplayDetector {
    pub fn new(store: ReplayStore, strict: bool) -> Self {
        Self { store, strict }
    }
}

impl Detector for ReplayDetector {
    fn detect(&self, request: &DetectRequest) -> std::result::Result<Vec<Detection>, DetectError> {
        let key = replay_key(request);
        match self.store.entries.get(&key) {
            Some(dets) => Ok(dets
                .iter()
                .map(|d| Detection {
                    category_id: d.category_id,
                    score: d.score,
                    bbox: BBox::try_from(d.bbox).expect("validated on load"),
                    source: DetectionSource::FullImage,
                })
                .collect()),
            None if self.strict => Err(DetectError::MissingReplayKey(key)),
            None => {
                warn!("replay store has no entry for {key}; returning no detections");
                Ok(Vec::new())
            }
        }
    }
}

/// Wraps a backend and records every answer into a [`ReplayStore`].
pub struct RecordingDetector<D> {
    inner: D,
    store: Mutex<ReplayStore>,
}

impl<D: Detector> RecordingDetector<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            store: Mutex::new(ReplayStore::default()),
        }
    }

    pub fn into_store(self) -> ReplayStore {
        self.store.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl<D: Detector> Detector for RecordingDetector<D> {
    fn detect(&self, request: &DetectRequest) -> std::result::Result<Vec<Detection>, DetectError> {
        let dets = self.inner.detect(request)?;
        let stored = dets
            .iter()
            .map(|d| StoredDetection {
                bbox: d.bbox.to_xyxy(),
                score: d.score,
                category_id: d.category_id,
            })
            .collect();
        self.store
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entries
            .insert(replay_key(request), stored);
        Ok(dets)
    }
}
