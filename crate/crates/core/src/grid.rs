//! Overlapping patch grid over an image.
//!
//! Offsets along each axis advance by `patch - ceil(patch * overlap)`; the
//! last offset is clamped to `image - patch` so the final patch ends flush
//! with the image edge. A patch at least as large as the image collapses
//! that axis to a single full-extent slice.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

// Absorbs float noise in `patch * overlap` (e.g. 100 * 0.07 = 7.000000000000001).
const OVERLAP_EPS: f64 = 1e-9;

/// Patch size and fractional overlap between neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub patch_w: u32,
    pub patch_h: u32,
    pub overlap_ratio: f64,
}

impl GridSpec {
    pub fn new(patch_w: u32, patch_h: u32, overlap_ratio: f64) -> Result<Self> {
        let spec = Self {
            patch_w,
            patch_h,
            overlap_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn square(patch: u32, overlap_ratio: f64) -> Result<Self> {
        Self::new(patch, patch, overlap_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_w == 0 || self.patch_h == 0 {
            return Err(Error::Config(format!(
                "patch size must be at least 1x1, got {}x{}",
                self.patch_w, self.patch_h
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::Config(format!(
                "overlap ratio must be in [0, 1), got {}",
                self.overlap_ratio
            )));
        }
        Ok(())
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            patch_w: 640,
            patch_h: 640,
            overlap_ratio: 0.25,
        }
    }
}

/// One patch of the grid, in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceRect {
    pub rect: BBox,
    pub index: usize,
    /// Factor applied to the patch before detection.
    pub resize_scale: f64,
}

impl SliceRect {
    pub fn x(&self) -> u32 {
        self.rect.x_min() as u32
    }

    pub fn y(&self) -> u32 {
        self.rect.y_min() as u32
    }

    pub fn width(&self) -> u32 {
        self.rect.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.rect.height() as u32
    }

    /// Same slice with `resize_scale = target_width / width`.
    pub fn with_target_width(mut self, target_width: u32) -> Self {
        self.resize_scale = f64::from(target_width) / self.rect.width();
        self
    }
}

/// Pixel step between consecutive patch offsets.
pub fn axis_step(patch: u32, overlap_ratio: f64) -> u32 {
    let overlap_px = (f64::from(patch) * overlap_ratio - OVERLAP_EPS).ceil().max(0.0) as u32;
    patch.saturating_sub(overlap_px).max(1)
}

/// Start offsets along one axis; the extent of each patch is `min(patch, image)`.
pub fn axis_offsets(image: u32, patch: u32, overlap_ratio: f64) -> Vec<u32> {
    if patch >= image {
        return vec![0];
    }
    let step = axis_step(patch, overlap_ratio);
    let last = image - patch;
    let mut offsets = Vec::with_capacity((last / step) as usize + 2);
    let mut offset = 0u32;
    while offset < last {
        offsets.push(offset);
        offset += step;
    }
    offsets.push(last);
    offsets.dedup();
    offsets
}

/// Row-major slice grid covering a `image_w x image_h` image.
pub fn compute_slice_grid(image_w: u32, image_h: u32, spec: &GridSpec) -> Result<Vec<SliceRect>> {
    spec.validate()?;
    if image_w == 0 || image_h == 0 {
        return Err(Error::Config(format!(
            "image must be at least 1x1, got {image_w}x{image_h}"
        )));
    }
    let xs = axis_offsets(image_w, spec.patch_w, spec.overlap_ratio);
    let ys = axis_offsets(image_h, spec.patch_h, spec.overlap_ratio);
    let w = spec.patch_w.min(image_w);
    let h = spec.patch_h.min(image_h);
    let mut slices = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let rect = BBox::from_xywh(f64::from(x), f64::from(y), f64::from(w), f64::from(h))
                .expect("grid rects have positive size");
            slices.push(SliceRect {
                rect,
                index: slices.len(),
                resize_scale: 1.0,
            });
        }
    }
    Ok(slices)
}

/// Whether every pixel of the image lies in at least one slice.
///
/// Works on the compressed grid of slice boundaries, which checks every pixel
/// exactly without enumerating them, so no sampling is needed even for very
/// large images.
pub fn coverage_check(image_w: u32, image_h: u32, slices: &[SliceRect]) -> bool {
    if slices.is_empty() || image_w == 0 || image_h == 0 {
        return false;
    }
    let (w, h) = (f64::from(image_w), f64::from(image_h));
    let mut xs: Vec<f64> = vec![0.0, w];
    for s in slices {
        xs.push(s.rect.x_min().clamp(0.0, w));
        xs.push(s.rect.x_max().clamp(0.0, w));
    }
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(slices.len());
    for cell in xs.windows(2) {
        let (x0, x1) = (cell[0], cell[1]);
        spans.clear();
        spans.extend(
            slices
                .iter()
                .filter(|s| s.rect.x_min() <= x0 && s.rect.x_max() >= x1)
                .map(|s| (s.rect.y_min(), s.rect.y_max())),
        );
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        for &(y0, y1) in &spans {
            if y0 > covered {
                break;
            }
            covered = f64::max(covered, y1);
        }
        if covered < h {
            return false;
        }
    }
    true
}
