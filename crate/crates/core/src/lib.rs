//! Sliced object-detection inference and fine-tuning data preparation.
//!
//! Images are cut into overlapping patches ([`grid`]), each patch is sent to a
//! [`detector::Detector`] at a larger resolution, and the detections are mapped
//! back and merged with greedy NMS ([`merge`], [`pipeline`]). The same grid
//! drives [`slicer`], which turns a COCO dataset into a patch dataset for
//! fine-tuning. [`eval`] scores predictions with the COCO AP50 protocol and
//! [`synth`] provides synthetic scenes to compare configurations on.

pub mod bbox;
pub mod coco;
pub mod detector;
pub mod error;
pub mod eval;
pub mod grid;
pub mod merge;
pub mod pipeline;
pub mod seed;
pub mod slicer;
pub mod synth;

pub use bbox::BBox;
pub use coco::{load_coco, save_coco, CocoDataset, Detection, PredictionRecord};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalResult};
pub use grid::{compute_slice_grid, GridSpec, SliceRect};
pub use merge::{nms, MergeConfig};
pub use pipeline::{run_sliced_inference, PipelineConfig};
