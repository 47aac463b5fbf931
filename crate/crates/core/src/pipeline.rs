//! Sliced inference: slice, detect per patch, remap, optional full-image
//! pass, merge.

use std::path::Path;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::coco::{save_predictions, write_text, CocoDataset, Detection, DetectionSource, PredictionRecord};
use crate::detector::{DetectRequest, Detector, ImageRef};
use crate::error::{Error, Result};
use crate::grid::{compute_slice_grid, GridSpec, SliceRect};
use crate::merge::{merge_sources, MergeConfig};

pub const DEFAULT_FI_TARGET_WIDTH: u32 = 1333;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    /// Run the detector on the slice grid.
    pub sliced_inference: bool,
    /// Width each patch is resized to; `None` means twice the patch width.
    pub target_width: Option<u32>,
    /// Add a detector pass over the whole image.
    pub full_inference: bool,
    pub fi_target_width: u32,
    pub merge: MergeConfig,
    pub seed: u64,
    pub parallelism: usize,
    /// Abort an image on the first failing patch instead of skipping it.
    pub strict: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            sliced_inference: true,
            target_width: None,
            full_inference: false,
            fi_target_width: DEFAULT_FI_TARGET_WIDTH,
            merge: MergeConfig::default(),
            seed: 0,
            parallelism: 1,
            strict: false,
        }
    }
}

impl PipelineConfig {
    pub fn patch_target_width(&self) -> u32 {
        self.target_width.unwrap_or(self.grid.patch_w.saturating_mul(2))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.merge.validate()?;
        if self.patch_target_width() == 0 {
            return Err(Error::Config("target_width must be >= 1".into()));
        }
        if self.fi_target_width == 0 {
            return Err(Error::Config("fi_target_width must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        if !self.sliced_inference && !self.full_inference {
            return Err(Error::Config(
                "at least one of sliced inference and full inference must be enabled".into(),
            ));
        }
        Ok(())
    }
}

fn remap_box(bbox: &BBox, scale: f64, origin_x: f64, origin_y: f64, image_w: u32, image_h: u32) -> Option<BBox> {
    BBox::new(
        bbox.x_min() / scale + origin_x,
        bbox.y_min() / scale + origin_y,
        bbox.x_max() / scale + origin_x,
        bbox.y_max() / scale + origin_y,
    )
    .ok()?
    .clamp_to(f64::from(image_w), f64::from(image_h))
}

/// Maps a detection from resized-patch to original-image coordinates,
/// clamping to the image. Returns `None` when nothing of the box remains.
pub fn remap_detection(det: &Detection, slice: &SliceRect, image_w: u32, image_h: u32) -> Option<Detection> {
    let bbox = remap_box(
        &det.bbox,
        slice.resize_scale,
        slice.rect.x_min(),
        slice.rect.y_min(),
        image_w,
        image_h,
    );
    match bbox {
        Some(bbox) => Some(Detection {
            bbox,
            source: DetectionSource::Patch(slice.index),
            ..det.clone()
        }),
        None => {
            warn!("slice {}: detection {} is empty after remapping, dropped", slice.index, det.bbox);
            None
        }
    }
}

/// One detector call planned for an image.
#[derive(Debug, Clone)]
struct PlannedCall {
    source: DetectionSource,
    region: BBox,
    target_width: u32,
}

fn plan_calls(image_w: u32, image_h: u32, config: &PipelineConfig) -> Result<Vec<PlannedCall>> {
    let mut calls = Vec::new();
    if config.sliced_inference {
        let tw = config.patch_target_width();
        for slice in compute_slice_grid(image_w, image_h, &config.grid)? {
            calls.push(PlannedCall {
                source: DetectionSource::Patch(slice.index),
                region: slice.rect,
                target_width: tw,
            });
        }
    }
    if config.full_inference {
        calls.push(PlannedCall {
            source: DetectionSource::FullImage,
            region: BBox::new(0.0, 0.0, f64::from(image_w), f64::from(image_h))?,
            target_width: config.fi_target_width,
        });
    }
    Ok(calls)
}

/// Result of sliced inference on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInference {
    /// Merged detections in original-image coordinates, canonical order.
    pub detections: Vec<Detection>,
    pub patches: usize,
    pub failed_patches: usize,
}

struct ImageJob<'a> {
    image: &'a ImageRef,
    image_id: u64,
    image_w: u32,
    image_h: u32,
    first_request_id: u64,
}

fn run_calls<D: Detector + ?Sized>(
    job: &ImageJob<'_>,
    config: &PipelineConfig,
    detector: &D,
    calls: &[PlannedCall],
    order: &[usize],
) -> Result<ImageInference> {
    let call_one = |pos: usize| -> Result<(usize, Option<Vec<Detection>>)> {
        let call = &calls[pos];
        let request = DetectRequest {
            request_id: job.first_request_id + pos as u64,
            image_id: job.image_id,
            image: job.image.clone(),
            region: call.region,
            target_width: call.target_width,
        };
        match detector.detect(&request) {
            Ok(raw) => {
                let scale = request.scale();
                let remapped = raw
                    .iter()
                    .filter_map(|d| {
                        let bbox = remap_box(
                            &d.bbox,
                            scale,
                            call.region.x_min(),
                            call.region.y_min(),
                            job.image_w,
                            job.image_h,
                        );
                        if bbox.is_none() {
                            warn!("image {}: detection {} is empty after remapping, dropped", job.image_id, d.bbox);
                        }
                        bbox.map(|bbox| Detection {
                            bbox,
                            source: call.source,
                            ..d.clone()
                        })
                    })
                    .collect();
                Ok((pos, Some(remapped)))
            }
            Err(e) if config.strict => Err(e.into()),
            Err(e) => {
                warn!("image {}: {:?} skipped: {e}", job.image_id, call.source);
                Ok((pos, None))
            }
        }
    };

    let answers: Vec<(usize, Option<Vec<Detection>>)> = if config.parallelism > 1 {
        order.par_iter().map(|&pos| call_one(pos)).collect::<Result<_>>()?
    } else {
        order.iter().map(|&pos| call_one(pos)).collect::<Result<_>>()?
    };

    let mut by_call: Vec<Option<Vec<Detection>>> = vec![None; calls.len()];
    let mut failed = 0;
    for (pos, dets) in answers {
        if dets.is_none() {
            failed += 1;
        }
        by_call[pos] = dets;
    }
    let mut patch_dets = Vec::new();
    let mut fi_dets = Vec::new();
    for (call, dets) in calls.iter().zip(by_call) {
        let dets = dets.unwrap_or_default();
        match call.source {
            DetectionSource::Patch(_) => patch_dets.extend(dets),
            DetectionSource::FullImage => fi_dets.extend(dets),
        }
    }
    Ok(ImageInference {
        detections: merge_sources(&patch_dets, &fi_dets, &config.merge),
        patches: calls
            .iter()
            .filter(|c| matches!(c.source, DetectionSource::Patch(_)))
            .count(),
        failed_patches: failed,
    })
}

fn with_pool<T: Send>(parallelism: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if parallelism <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {parallelism} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Runs sliced (and optionally full-image) inference on one image and
/// returns merged detections in image coordinates.
pub fn run_sliced_inference<D: Detector + ?Sized>(
    image: &ImageRef,
    image_id: u64,
    image_w: u32,
    image_h: u32,
    config: &PipelineConfig,
    detector: &D,
) -> Result<ImageInference> {
    config.validate()?;
    let calls = plan_calls(image_w, image_h, config)?;
    let order: Vec<usize> = (0..calls.len()).collect();
    let job = ImageJob {
        image,
        image_id,
        image_w,
        image_h,
        first_request_id: 0,
    };
    with_pool(config.parallelism, || run_calls(&job, config, detector, &calls, &order))?
}

/// Like [`run_sliced_inference`] but dispatches detector calls in the given
/// permutation of `0..n_calls` (patches in grid order, then the full-image
/// pass). The result does not depend on the permutation.
pub fn run_sliced_inference_in_order<D: Detector + ?Sized>(
    image: &ImageRef,
    image_id: u64,
    image_w: u32,
    image_h: u32,
    config: &PipelineConfig,
    detector: &D,
    order: &[usize],
) -> Result<ImageInference> {
    config.validate()?;
    let calls = plan_calls(image_w, image_h, config)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..calls.len()).collect::<Vec<_>>() {
        return Err(Error::Config(format!(
            "order must be a permutation of 0..{}",
            calls.len()
        )));
    }
    let job = ImageJob {
        image,
        image_id,
        image_w,
        image_h,
        first_request_id: 0,
    };
    with_pool(config.parallelism, || run_calls(&job, config, detector, &calls, order))?
}

/// Per-image statistics of a dataset run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: u64,
    pub patches: usize,
    pub failed_patches: usize,
    pub detections: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub images: Vec<ImageReport>,
    pub total_patches: usize,
    pub total_detections: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetInference {
    pub predictions: Vec<PredictionRecord>,
    pub report: InferenceReport,
}

/// A dataset run that stopped early, with everything produced before the failure.
#[derive(Debug)]
pub struct InferenceAbort {
    pub partial: DatasetInference,
    pub error: Error,
}

/// Runs the pipeline over every image of `dataset` (in dataset order).
pub fn infer_dataset<D: Detector + ?Sized>(
    dataset: &CocoDataset,
    image_root: &Path,
    config: &PipelineConfig,
    detector: &D,
) -> std::result::Result<DatasetInference, InferenceAbort> {
    let mut out = DatasetInference::default();
    if let Err(error) = config.validate() {
        return Err(InferenceAbort { partial: out, error });
    }
    let run = || -> std::result::Result<(), Error> {
        let mut next_request_id = 0u64;
        for img in &dataset.images {
            let started = Instant::now();
            let image = ImageRef::Path(image_root.join(&img.file_name));
            let calls = plan_calls(img.width, img.height, config)?;
            let order: Vec<usize> = (0..calls.len()).collect();
            let job = ImageJob {
                image: &image,
                image_id: img.id,
                image_w: img.width,
                image_h: img.height,
                first_request_id: next_request_id,
            };
            next_request_id += calls.len() as u64;
            let result = run_calls(&job, config, detector, &calls, &order)?;
            out.report.images.push(ImageReport {
                image_id: img.id,
                patches: result.patches,
                failed_patches: result.failed_patches,
                detections: result.detections.len(),
                millis: started.elapsed().as_secs_f64() * 1e3,
            });
            out.report.total_patches += result.patches;
            out.report.total_detections += result.detections.len();
            out.predictions
                .extend(result.detections.iter().map(|d| d.to_prediction(img.id)));
        }
        Ok(())
    };
    let outcome = match with_pool(config.parallelism, run) {
        Ok(inner) => inner,
        Err(e) => Err(e),
    };
    match outcome {
        Ok(()) => Ok(out),
        Err(error) => Err(InferenceAbort { partial: out, error }),
    }
}

/// Runs [`infer_dataset`] and writes the COCO results file and the report.
/// On failure the partial results are still written before the error is
/// returned.
pub fn run_dataset_inference<D: Detector + ?Sized>(
    dataset: &CocoDataset,
    image_root: &Path,
    config: &PipelineConfig,
    detector: &D,
    out_path: &Path,
    report_path: Option<&Path>,
) -> Result<DatasetInference> {
    let (result, error) = match infer_dataset(dataset, image_root, config, detector) {
        Ok(r) => (r, None),
        Err(abort) => (abort.partial, Some(abort.error)),
    };
    save_predictions(&result.predictions, out_path)?;
    if let Some(path) = report_path {
        let text = serde_json::to_string_pretty(&result.report).expect("report serialization is infallible");
        write_text(path, &(text + "\n"))?;
    }
    match error {
        Some(e) => Err(e),
        None => Ok(result),
    }
}
