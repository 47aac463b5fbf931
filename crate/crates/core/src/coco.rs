//! COCO detection datasets, results files and the shared detection record.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Where a detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectionSource {
    Patch(usize),
    FullImage,
}

/// A single scored box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub category_id: u64,
    pub score: f64,
    pub bbox: BBox,
    pub source: DetectionSource,
}

impl Detection {
    pub fn to_prediction(&self, image_id: u64) -> PredictionRecord {
        PredictionRecord {
            image_id,
            category_id: self.category_id,
            bbox: self.bbox,
            score: self.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

/// Location of a patch inside the image it was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceOrigin {
    pub source_image_id: u64,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Aspect-preserving resize the training framework should apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizeHint {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<SliceOrigin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resize: Option<ResizeHint>,
}

impl ImageRecord {
    pub fn new(id: u64, file_name: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id,
            file_name: file_name.into(),
            width,
            height,
            slice: None,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub area: f64,
    pub iscrowd: bool,
}

impl Annotation {
    /// Annotation whose `area` is the box area.
    pub fn new(id: u64, image_id: u64, category_id: u64, bbox: BBox) -> Self {
        Self {
            id,
            image_id,
            category_id,
            bbox,
            area: bbox.area(),
            iscrowd: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl CocoDataset {
    /// Checks id uniqueness, image sizes and referential integrity.
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::DuplicateId {
                    kind: "image",
                    id: img.id,
                });
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::InvalidValue {
                    field: "image size",
                    message: format!("image {} is {}x{}", img.id, img.width, img.height),
                });
            }
        }
        let mut category_ids = HashSet::new();
        for cat in &self.categories {
            if !category_ids.insert(cat.id) {
                return Err(Error::DuplicateId {
                    kind: "category",
                    id: cat.id,
                });
            }
        }
        let mut annotation_ids = HashSet::new();
        for ann in &self.annotations {
            if !annotation_ids.insert(ann.id) {
                return Err(Error::DuplicateId {
                    kind: "annotation",
                    id: ann.id,
                });
            }
            if !image_ids.contains(&ann.image_id) {
                return Err(Error::DanglingImage {
                    annotation_id: ann.id,
                    image_id: ann.image_id,
                });
            }
            if !category_ids.contains(&ann.category_id) {
                return Err(Error::DanglingCategory {
                    annotation_id: ann.id,
                    category_id: ann.category_id,
                });
            }
            if !(ann.area > 0.0) {
                return Err(Error::InvalidValue {
                    field: "annotation area",
                    message: format!("annotation {} has area {}", ann.id, ann.area),
                });
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.id == id)
    }

    /// Annotations grouped by image id, each group in file order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for ann in &self.annotations {
            map.entry(ann.image_id).or_default().push(ann);
        }
        map
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, JsonDatasetError> {
        let raw: RawDataset = serde_json::from_str(text).map_err(JsonDatasetError::Json)?;
        raw.into_dataset().map_err(JsonDatasetError::Invalid)
    }

    pub fn to_json_string(&self) -> String {
        let out = OutDataset {
            images: &self.images,
            annotations: self.annotations.iter().map(OutAnnotation::from).collect(),
            categories: &self.categories,
        };
        let mut s = serde_json::to_string(&out).expect("dataset serialization is infallible");
        s.push('\n');
        s
    }
}

#[derive(Debug)]
pub enum JsonDatasetError {
    Json(serde_json::Error),
    Invalid(Error),
}

/// Reads a COCO detection file, converting `[x, y, w, h]` boxes to corners.
pub fn load_coco(path: impl AsRef<Path>) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CocoDataset::from_json_str(&text).map_err(|e| match e {
        JsonDatasetError::Json(source) => Error::parse(path, source),
        JsonDatasetError::Invalid(err) => err,
    })
}

/// Writes a COCO detection file. Boxes and areas use two decimals.
pub fn save_coco(dataset: &CocoDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    write_text(path, &dataset.to_json_string())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::parse(path, e))
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

impl PredictionRecord {
    pub fn to_detection(&self) -> Detection {
        Detection {
            category_id: self.category_id,
            score: self.score,
            bbox: self.bbox,
            source: DetectionSource::FullImage,
        }
    }
}

pub fn predictions_to_json(preds: &[PredictionRecord]) -> String {
    let out: Vec<OutPrediction> = preds.iter().map(OutPrediction::from).collect();
    let mut s = serde_json::to_string(&out).expect("prediction serialization is infallible");
    s.push('\n');
    s
}

pub fn predictions_from_json(text: &str) -> std::result::Result<Vec<PredictionRecord>, JsonDatasetError> {
    let raw: Vec<RawPrediction> = serde_json::from_str(text).map_err(JsonDatasetError::Json)?;
    raw.into_iter()
        .enumerate()
        .map(|(index, p)| {
            let [x, y, w, h] = p.bbox;
            let bbox = BBox::from_xywh(x, y, w, h)
                .map_err(|source| JsonDatasetError::Invalid(Error::PredictionGeometry { index, source }))?;
            if !(0.0..=1.0).contains(&p.score) {
                return Err(JsonDatasetError::Invalid(Error::InvalidValue {
                    field: "score",
                    message: format!("prediction #{index} has score {} outside [0, 1]", p.score),
                }));
            }
            Ok(PredictionRecord {
                image_id: p.image_id,
                category_id: p.category_id,
                bbox,
                score: p.score,
            })
        })
        .collect()
}

/// Reads a COCO results file (`[{image_id, category_id, bbox: [x,y,w,h], score}]`).
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    predictions_from_json(&text).map_err(|e| match e {
        JsonDatasetError::Json(source) => Error::parse(path, source),
        JsonDatasetError::Invalid(err) => err,
    })
}

pub fn save_predictions(preds: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &predictions_to_json(preds))
}

fn fixed2(v: f64) -> Box<RawValue> {
    let mut s = format!("{v:.2}");
    if s == "-0.00" {
        s = "0.00".to_owned();
    }
    RawValue::from_string(s).expect("formatted float is valid JSON")
}

fn xywh_fixed(b: &BBox) -> [Box<RawValue>; 4] {
    b.to_xywh().map(fixed2)
}

#[derive(Deserialize)]
struct RawDataset {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    categories: Vec<Category>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
}

impl RawDataset {
    fn into_dataset(self) -> Result<CocoDataset> {
        let annotations = self
            .annotations
            .into_iter()
            .map(|a| {
                let [x, y, w, h] = a.bbox;
                let bbox = BBox::from_xywh(x, y, w, h).map_err(|source| Error::AnnotationGeometry {
                    annotation_id: a.id,
                    source,
                })?;
                let area = match a.area {
                    Some(area) if area > 0.0 => area,
                    _ => bbox.area(),
                };
                Ok(Annotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox,
                    area,
                    iscrowd: a.iscrowd != 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dataset = CocoDataset {
            images: self.images,
            annotations,
            categories: self.categories,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

#[derive(Serialize)]
struct OutDataset<'a> {
    images: &'a [ImageRecord],
    annotations: Vec<OutAnnotation>,
    categories: &'a [Category],
}

#[derive(Serialize)]
struct OutAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [Box<RawValue>; 4],
    area: Box<RawValue>,
    iscrowd: u8,
}

impl From<&Annotation> for OutAnnotation {
    fn from(a: &Annotation) -> Self {
        Self {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: xywh_fixed(&a.bbox),
            area: fixed2(a.area),
            iscrowd: a.iscrowd as u8,
        }
    }
}

#[derive(Deserialize)]
struct RawPrediction {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Serialize)]
struct OutPrediction {
    image_id: u64,
    category_id: u64,
    bbox: [Box<RawValue>; 4],
    score: f64,
}

impl From<&PredictionRecord> for OutPrediction {
    fn from(p: &PredictionRecord) -> Self {
        Self {
            image_id: p.image_id,
            category_id: p.category_id,
            bbox: xywh_fixed(&p.bbox),
            score: p.score,
        }
    }
}
