use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DetectError, DetectRequest, Detector};
use crate::bbox::BBox;
use crate::coco::{Annotation, CocoDataset, Detection, DetectionSource};
use crate::error::{Error, Result};
use crate::seed::derived_rng;

/// Apparent-size model used by the ground-truth oracle.
///
/// An object is visible iff the shorter side of its (region-clipped) box,
/// measured after resizing, is at least `min_apparent_px`. Its score rises
/// linearly with that side and saturates at `score_saturation_px`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilityModel {
    pub min_apparent_px: f64,
    pub score_saturation_px: f64,
    pub score_floor: f64,
    /// Half-width of the uniform jitter added to each box edge, resized pixels.
    pub localization_noise_px: f64,
}

impl Default for VisibilityModel {
    fn default() -> Self {
        Self {
            min_apparent_px: 32.0,
            score_saturation_px: 64.0,
            score_floor: 0.05,
            localization_noise_px: 1.0,
        }
    }
}

impl VisibilityModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_apparent_px >= 0.0 && self.min_apparent_px.is_finite()) {
            return Err(Error::Config(format!(
                "min_apparent_px must be >= 0, got {}",
                self.min_apparent_px
            )));
        }
        if !(self.score_saturation_px > 0.0) {
            return Err(Error::Config(format!(
                "score_saturation_px must be > 0, got {}",
                self.score_saturation_px
            )));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!(
                "score_floor must be in [0, 1], got {}",
                self.score_floor
            )));
        }
        if !(self.localization_noise_px >= 0.0 && self.localization_noise_px.is_finite()) {
            return Err(Error::Config(format!(
                "localization_noise_px must be >= 0, got {}",
                self.localization_noise_px
            )));
        }
        Ok(())
    }

    pub fn score(&self, apparent_min_side: f64) -> f64 {
        (apparent_min_side / self.score_saturation_px).clamp(self.score_floor, 1.0)
    }
}

/// Ground truth filtered through a [`VisibilityModel`].
///
/// Boxes are clipped to the request region, mapped into resized-region
/// coordinates and jittered with a generator seeded by
/// `(seed, image_id, region)`, so the answer does not depend on call order.
pub fn oracle_detect(
    request: &DetectRequest,
    ground_truth: &[Annotation],
    visibility: &VisibilityModel,
    seed: u64,
) -> Vec<Detection> {
    let region = request.region;
    let scale = request.scale();
    let (out_w, out_h) = request.resized_extent();
    let mut rng = derived_rng(
        seed,
        "oracle",
        &[
            request.image_id,
            region.x_min().to_bits(),
            region.y_min().to_bits(),
            region.x_max().to_bits(),
            region.y_max().to_bits(),
        ],
    );
    let noise = visibility.localization_noise_px;

    let mut out = Vec::new();
    for ann in ground_truth.iter().filter(|a| !a.iscrowd) {
        let Some(clipped) = ann.bbox.intersection(&region) else {
            continue;
        };
        let apparent = clipped.min_side() * scale;
        if apparent < visibility.min_apparent_px {
            continue;
        }
        let local = BBox::new(
            (clipped.x_min() - region.x_min()) * scale,
            (clipped.y_min() - region.y_min()) * scale,
            (clipped.x_max() - region.x_min()) * scale,
            (clipped.y_max() - region.y_min()) * scale,
        )
        .expect("clipped box keeps positive size");
        let bbox = if noise > 0.0 {
            let mut j = || rng.random_range(-noise..=noise);
            let (a, b, c, d) = (j(), j(), j(), j());
            BBox::new(
                local.x_min() + a,
                local.y_min() + b,
                local.x_max() + c,
                local.y_max() + d,
            )
            .ok()
            .and_then(|bb| bb.clamp_to(out_w, out_h))
            .unwrap_or(local)
        } else {
            local
        };
        out.push(Detection {
            category_id: ann.category_id,
            score: visibility.score(apparent),
            bbox,
            source: DetectionSource::FullImage,
        });
    }
    out
}

pub struct OracleDetector {
    ground_truth: HashMap<u64, Vec<Annotation>>,
    visibility: VisibilityModel,
    seed: u64,
}

impl OracleDetector {
    pub fn new(dataset: &CocoDataset, visibility: VisibilityModel, seed: u64) -> Result<Self> {
        visibility.validate()?;
        let mut ground_truth: HashMap<u64, Vec<Annotation>> =
            dataset.images.iter().map(|img| (img.id, Vec::new())).collect();
        for ann in &dataset.annotations {
            ground_truth.entry(ann.image_id).or_default().push(ann.clone());
        }
        for anns in ground_truth.values_mut() {
            anns.sort_by_key(|a| a.id);
        }
        Ok(Self {
            ground_truth,
            visibility,
            seed,
        })
    }

    pub fn visibility(&self) -> &VisibilityModel {
        &self.visibility
    }
}

impl Detector for OracleDetector {
    fn detect(&self, request: &DetectRequest) -> std::result::Result<Vec<Detection>, DetectError> {
        let gt = self
            .ground_truth
            .get(&request.image_id)
            .ok_or(DetectError::UnknownImage(request.image_id))?;
        Ok(oracle_detect(request, gt, &self.visibility, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ImageRef;
    use crate::coco::{Category, ImageRecord};
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn scene(boxes: &[[f64; 4]]) -> CocoDataset {
        CocoDataset {
            images: vec![ImageRecord::new(1, "scene.png", 2048, 2048)],
            annotations: boxes
                .iter()
                .enumerate()
                .map(|(i, b)| Annotation::new(i as u64 + 1, 1, 1, BBox::try_from(*b).unwrap()))
                .collect(),
            categories: vec![Category {
                id: 1,
                name: "thing".into(),
                supercategory: None,
            }],
        }
    }

    fn request(region: [f64; 4], target_width: u32) -> DetectRequest {
        DetectRequest {
            request_id: 0,
            image_id: 1,
            image: ImageRef::Path(PathBuf::from("scene.png")),
            region: BBox::try_from(region).unwrap(),
            target_width,
        }
    }

    fn vis(min_apparent_px: f64, noise: f64) -> VisibilityModel {
        VisibilityModel {
            min_apparent_px,
            localization_noise_px: noise,
            ..VisibilityModel::default()
        }
    }

    #[test]
    fn small_object_invisible_in_downscaled_full_image() {
        let ds = scene(&[[1000.0, 1000.0, 1016.0, 1016.0]]);
        let oracle = OracleDetector::new(&ds, vis(32.0, 0.0), 0).unwrap();
        let full = oracle.detect(&request([0.0, 0.0, 2048.0, 2048.0], 1024)).unwrap();
        assert!(full.is_empty());
    }

    #[test]
    fn small_object_visible_in_upscaled_patch() {
        let ds = scene(&[[1000.0, 1000.0, 1016.0, 1016.0]]);
        let oracle = OracleDetector::new(&ds, vis(32.0, 0.0), 0).unwrap();
        let dets = oracle.detect(&request([768.0, 768.0, 1280.0, 1280.0], 1024)).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox.to_xyxy(), [464.0, 464.0, 496.0, 496.0]);
        assert_eq!(dets[0].score, 0.5);
    }

    #[test]
    fn identity_configuration_returns_ground_truth() {
        let boxes = [[10.0, 10.0, 30.0, 50.0], [100.0, 5.0, 101.0, 6.0], [2000.0, 2000.0, 2048.0, 2048.0]];
        let ds = scene(&boxes);
        let oracle = OracleDetector::new(&ds, vis(0.0, 0.0), 3).unwrap();
        let dets = oracle.detect(&request([0.0, 0.0, 2048.0, 2048.0], 2048)).unwrap();
        let got: Vec<[f64; 4]> = dets.iter().map(|d| d.bbox.to_xyxy()).collect();
        assert_eq!(got, boxes.to_vec());
    }

    #[test]
    fn objects_are_clipped_to_the_region() {
        let ds = scene(&[[90.0, 0.0, 150.0, 40.0]]);
        let oracle = OracleDetector::new(&ds, vis(0.0, 0.0), 0).unwrap();
        let dets = oracle.detect(&request([0.0, 0.0, 100.0, 100.0], 200)).unwrap();
        assert_eq!(dets[0].bbox.to_xyxy(), [180.0, 0.0, 200.0, 80.0]);
    }

    #[test]
    fn unknown_image_is_an_error() {
        let oracle = OracleDetector::new(&scene(&[]), vis(0.0, 0.0), 0).unwrap();
        let mut req = request([0.0, 0.0, 10.0, 10.0], 10);
        req.image_id = 42;
        assert!(matches!(oracle.detect(&req), Err(DetectError::UnknownImage(42))));
    }

    #[test]
    fn jitter_is_deterministic_and_bounded() {
        let ds = scene(&[[100.0, 100.0, 140.0, 150.0], [0.0, 0.0, 40.0, 40.0]]);
        let oracle = OracleDetector::new(&ds, vis(0.0, 2.0), 9).unwrap();
        let req = request([0.0, 0.0, 512.0, 512.0], 1024);
        let a = oracle.detect(&req).unwrap();
        let b = oracle.detect(&req).unwrap();
        assert_eq!(a, b);
        let (w, h) = req.resized_extent();
        for d in &a {
            assert!(d.bbox.x_min() >= 0.0 && d.bbox.y_min() >= 0.0);
            assert!(d.bbox.x_max() <= w && d.bbox.y_max() <= h);
        }
        assert_ne!(a[0].bbox.to_xyxy(), [200.0, 200.0, 280.0, 300.0]);
    }

    proptest! {
        #[test]
        fn raising_target_width_never_hides_objects(
            x in 0.0..1900.0f64, y in 0.0..1900.0f64,
            w in 1.0..120.0f64, h in 1.0..120.0f64,
            tw in 64u32..2048, extra in 1u32..2048,
        ) {
            let ds = scene(&[[x, y, x + w, y + h]]);
            let oracle = OracleDetector::new(&ds, vis(32.0, 1.0), 5).unwrap();
            let low = oracle.detect(&request([0.0, 0.0, 2048.0, 2048.0], tw)).unwrap();
            let high = oracle.detect(&request([0.0, 0.0, 2048.0, 2048.0], tw + extra)).unwrap();
            prop_assert!(high.len() >= low.len());
        }
    }
}
