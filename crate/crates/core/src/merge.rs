//! Greedy NMS fusion of patch and full-image detections.
//!
//! Detections scoring below `t_d` are removed first. The survivors are put in
//! canonical order and a detection is kept iff its IoU with every detection
//! already kept (of the same category when class-aware) is at most `t_m`. A
//! pair with IoU exactly `t_m` is not suppressed.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::coco::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    /// IoU matching threshold.
    pub t_m: f64,
    /// Minimum detection score.
    pub t_d: f64,
    pub class_aware: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            t_m: 0.5,
            t_d: 0.0,
            class_aware: true,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_m > 0.0 && self.t_m <= 1.0) {
            return Err(Error::Config(format!(
                "t_m (IoU matching threshold) must be in (0, 1], got {}",
                self.t_m
            )));
        }
        if !(0.0..=1.0).contains(&self.t_d) {
            return Err(Error::Config(format!(
                "t_d (minimum detection score) must be in [0, 1], got {}",
                self.t_d
            )));
        }
        Ok(())
    }
}

/// Total order: score descending, then `x_min`, `y_min`, category, and the
/// remaining corners so that no two distinct detections compare equal.
pub fn canonical_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.x_min().total_cmp(&b.bbox.x_min()))
        .then_with(|| a.bbox.y_min().total_cmp(&b.bbox.y_min()))
        .then_with(|| a.category_id.cmp(&b.category_id))
        .then_with(|| a.bbox.x_max().total_cmp(&b.bbox.x_max()))
        .then_with(|| a.bbox.y_max().total_cmp(&b.bbox.y_max()))
        .then_with(|| a.source.cmp(&b.source))
}

pub fn canonical_sort(detections: &mut [Detection]) {
    detections.sort_by(canonical_cmp);
}

/// Greedy hard NMS. The input order does not matter.
pub fn nms(detections: &[Detection], config: &MergeConfig) -> Vec<Detection> {
    let mut candidates: Vec<Detection> = detections
        .iter()
        .filter(|d| d.score >= config.t_d)
        .cloned()
        .collect();
    canonical_sort(&mut candidates);

    let mut kept: Vec<Detection> = Vec::with_capacity(candidates.len());
    for det in candidates {
        let suppressed = kept.iter().any(|k| {
            (!config.class_aware || k.category_id == det.category_id)
                && k.bbox.iou(&det.bbox) > config.t_m
        });
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Fuses sliced and full-image detections. FI boxes get no priority beyond
/// their scores.
pub fn merge_sources(
    patch_dets: &[Detection],
    fi_dets: &[Detection],
    config: &MergeConfig,
) -> Vec<Detection> {
    let all: Vec<Detection> = patch_dets.iter().chain(fi_dets).cloned().collect();
    nms(&all, config)
}

/// Pluggable merge step.
pub trait MergeStrategy: Send + Sync {
    fn merge(&self, detections: &[Detection]) -> Vec<Detection>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyNms(pub MergeConfig);

impl MergeStrategy for GreedyNms {
    fn merge(&self, detections: &[Detection]) -> Vec<Detection> {
        nms(detections, &self.0)
    }
}
