//! Synthetic scenes of solid rectangles and a benchmark driver that runs
//! pipeline configurations against them with the oracle detector.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::coco::{save_coco, save_predictions, write_text, Annotation, Category, CocoDataset, ImageRecord};
use crate::detector::{OracleDetector, VisibilityModel};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, evaluate, ComparisonTable, EvalConfig, EvalResult};
use crate::grid::GridSpec;
use crate::merge::MergeConfig;
use crate::pipeline::{infer_dataset, PipelineConfig};
use crate::seed::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Background {
    Flat { color: [u8; 3] },
    /// Uniform per-pixel noise of `amplitude` around `base`.
    Noise { base: [u8; 3], amplitude: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: (u32, u32),
    pub n_images: usize,
    /// Inclusive.
    pub objects_per_image: (u32, u32),
    pub small_size_range: (u32, u32),
    pub large_size_range: (u32, u32),
    pub large_object_fraction: f64,
    pub n_categories: u32,
    /// When set, `seam_fraction` of the objects are placed across a line at a
    /// multiple of this period.
    pub seam_period: Option<u32>,
    pub seam_fraction: f64,
    /// Minimum empty margin between objects.
    pub min_gap: u32,
    pub background: Background,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (2048, 2048),
            n_images: 100,
            objects_per_image: (20, 40),
            small_size_range: (8, 24),
            large_size_range: (200, 400),
            large_object_fraction: 0.0,
            n_categories: 3,
            seam_period: None,
            seam_fraction: 0.0,
            min_gap: 4,
            background: Background::Flat { color: [48, 48, 48] },
            seed: 0,
        }
    }
}

pub const SCENE_PRESETS: [&str; 3] = ["default", "large", "seams"];

const MAX_PLACEMENT_TRIES: usize = 200;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

impl SceneConfig {
    /// Named scenes: `default` (small objects only), `large` (adds 200-400 px
    /// objects) and `seams` (half the objects straddle 256 px seams).
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        let base = Self {
            seed,
            ..Self::default()
        };
        match name {
            "default" => Some(base),
            "large" => Some(Self {
                n_images: 30,
                objects_per_image: (10, 20),
                large_object_fraction: 0.3,
                ..base
            }),
            "seams" => Some(Self {
                n_images: 30,
                seam_period: Some(256),
                seam_fraction: 0.5,
                ..base
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        let bad = |msg: String| Err(Error::Config(msg));
        if w == 0 || h == 0 {
            return bad("image size must be positive".into());
        }
        let mut ranges = vec![("small_size_range", self.small_size_range)];
        if self.large_object_fraction > 0.0 {
            ranges.push(("large_size_range", self.large_size_range));
        }
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})"));
            }
            if hi >= w.min(h) {
                return bad(format!("{name} upper bound {hi} must be below the image size"));
            }
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return bad("objects_per_image must satisfy lo <= hi".into());
        }
        for (name, v) in [("large_object_fraction", self.large_object_fraction), ("seam_fraction", self.seam_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.n_categories == 0 {
            return bad("n_categories must be at least 1".into());
        }
        if self.seam_period == Some(0) {
            return bad("seam_period must be positive".into());
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        (1..=self.n_categories)
            .map(|id| Category {
                id: u64::from(id),
                name: format!("class_{id}"),
                supercategory: None,
            })
            .collect()
    }
}

fn category_color(category_id: u64) -> [u8; 3] {
    PALETTE[(category_id as usize - 1) % PALETTE.len()]
}

fn overlaps_with_gap(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x_min() < b.x_max() + gap && b.x_min() < a.x_max() + gap && a.y_min() < b.y_max() + gap && b.y_min() < a.y_max() + gap
}

fn propose<R: Rng>(rng: &mut R, config: &SceneConfig, w: u32, h: u32) -> Option<BBox> {
    let (iw, ih) = config.image_size;
    if let Some(period) = config.seam_period {
        if rng.random_bool(config.seam_fraction) {
            let vertical = rng.random_bool(0.5);
            let (extent, side) = if vertical { (iw, w) } else { (ih, h) };
            let seams = (extent - 1) / period;
            if seams >= 1 && side >= 2 {
                let line = rng.random_range(1..=seams) * period;
                let cut = rng.random_range(1..side);
                if line >= cut && line - cut + side <= extent {
                    let start = line - cut;
                    let other = if vertical { ih - h } else { iw - w };
                    let across = rng.random_range(0..=other);
                    let (x, y) = if vertical { (start, across) } else { (across, start) };
                    return rect(x, y, w, h);
                }
                return None;
            }
        }
    }
    let x = rng.random_range(0..=iw - w);
    let y = rng.random_range(0..=ih - h);
    rect(x, y, w, h)
}

fn rect(x: u32, y: u32, w: u32, h: u32) -> Option<BBox> {
    BBox::from_xywh(f64::from(x), f64::from(y), f64::from(w), f64::from(h)).ok()
}

/// Object layout of one image: `(category_id, box)` pairs.
fn place_objects(config: &SceneConfig, index: usize) -> Vec<(u64, BBox)> {
    let mut rng = derived_rng(config.seed, "scene", &[index as u64]);
    let count = rng.random_range(config.objects_per_image.0..=config.objects_per_image.1);
    let gap = f64::from(config.min_gap);
    let mut placed: Vec<(u64, BBox)> = Vec::with_capacity(count as usize);
    let mut dropped = 0;
    for _ in 0..count {
        let large = rng.random_bool(config.large_object_fraction);
        let (lo, hi) = if large {
            config.large_size_range
        } else {
            config.small_size_range
        };
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let category = u64::from(rng.random_range(1..=config.n_categories));
        let spot = (0..MAX_PLACEMENT_TRIES).find_map(|_| {
            propose(&mut rng, config, w, h).filter(|b| !placed.iter().any(|(_, p)| overlaps_with_gap(b, p, gap)))
        });
        match spot {
            Some(b) => placed.push((category, b)),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        warn!("scene image {index}: no room for {dropped} of {count} objects, generated with fewer");
    }
    placed
}

/// The annotation side of a scene, without touching the filesystem.
pub fn scene_annotations(config: &SceneConfig) -> Result<CocoDataset> {
    config.validate()?;
    let (w, h) = config.image_size;
    let layouts: Vec<Vec<(u64, BBox)>> = (0..config.n_images).into_par_iter().map(|i| place_objects(config, i)).collect();
    let mut ds = CocoDataset {
        categories: config.categories(),
        ..CocoDataset::default()
    };
    let mut next_ann = 1;
    for (i, layout) in layouts.into_iter().enumerate() {
        let image_id = i as u64 + 1;
        ds.images.push(ImageRecord::new(image_id, scene_file_name(i), w, h));
        for (category, bbox) in layout {
            ds.annotations.push(Annotation::new(next_ann, image_id, category, bbox));
            next_ann += 1;
        }
    }
    Ok(ds)
}

fn scene_file_name(index: usize) -> String {
    format!("scene_{:04}.png", index + 1)
}

/// Paints one scene image: background, then each annotation as a filled
/// rectangle in its category color.
pub fn render_scene_image(config: &SceneConfig, dataset: &CocoDataset, image: &ImageRecord) -> RgbImage {
    let mut img = match config.background {
        Background::Flat { color } => RgbImage::from_pixel(image.width, image.height, Rgb(color)),
        Background::Noise { base, amplitude } => {
            let mut rng = derived_rng(config.seed, "background", &[image.id]);
            let a = i16::from(amplitude);
            RgbImage::from_fn(image.width, image.height, |_, _| {
                Rgb(base.map(|c| (i16::from(c) + rng.random_range(-a..=a)).clamp(0, 255) as u8))
            })
        }
    };
    for ann in dataset.annotations.iter().filter(|a| a.image_id == image.id) {
        let color = Rgb(category_color(ann.category_id));
        let [x0, y0, x1, y1] = ann.bbox.to_xyxy().map(|v| v as u32);
        for y in y0..y1.min(image.height) {
            for x in x0..x1.min(image.width) {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

/// Writes `out_dir/images/*.png` and `out_dir/annotations.json`.
pub fn generate_scene_dataset(config: &SceneConfig, out_dir: &Path) -> Result<CocoDataset> {
    let ds = scene_annotations(config)?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    ds.images.par_iter().try_for_each(|record| {
        let path = images_dir.join(&record.file_name);
        render_scene_image(config, &ds, record)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path, source })
    })?;
    save_coco(&ds, out_dir.join("annotations.json"))?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub label: String,
    pub pipeline: PipelineConfig,
}

/// Pipeline settings shared by the built-in benchmark runs: 256 px patches
/// resized to 1024 px (4x), full-image pass resized to 1333 px.
fn sahi(overlap: f64, full_inference: bool) -> PipelineConfig {
    PipelineConfig {
        grid: GridSpec {
            patch_w: 256,
            patch_h: 256,
            overlap_ratio: overlap,
        },
        target_width: Some(1024),
        full_inference,
        merge: MergeConfig::default(),
        ..PipelineConfig::default()
    }
}

fn full_image_only() -> PipelineConfig {
    PipelineConfig {
        sliced_inference: false,
        full_inference: true,
        ..sahi(0.25, true)
    }
}

/// The comparison each preset is built to show.
pub fn preset_runs(scene: &str) -> Option<Vec<BenchRun>> {
    let run = |label: &str, pipeline| BenchRun {
        label: label.into(),
        pipeline,
    };
    match scene {
        "default" => Some(vec![run("FI", full_image_only()), run("SAHI+PO", sahi(0.25, false))]),
        "large" => Some(vec![run("SAHI+PO", sahi(0.25, false)), run("SAHI+FI+PO", sahi(0.25, true))]),
        "seams" => Some(vec![run("SAHI", sahi(0.0, false)), run("SAHI+PO", sahi(0.25, false))]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub scene: SceneConfig,
    pub visibility: VisibilityModel,
    pub eval: EvalConfig,
    pub runs: Vec<BenchRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub pipeline: PipelineConfig,
    pub patches: usize,
    pub detections: usize,
    pub predictions_file: String,
    pub result: EvalResult,
}

/// Everything in here is a function of the spec, so the serialized report is
/// reproducible byte for byte. Wall-clock figures live in [`RunTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scene: SceneConfig,
    pub visibility: VisibilityModel,
    pub images: usize,
    pub annotations: usize,
    pub runs: Vec<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub label: String,
    pub inference_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub report: BenchmarkReport,
    pub table: ComparisonTable,
    pub timings: Vec<RunTiming>,
    pub generation_seconds: f64,
}

/// Generates the scene once under `out_dir/dataset`, runs every
/// configuration with the oracle detector and writes `report.json`,
/// `table.txt`, `table.csv`, `timings.json` and one predictions file per run.
pub fn run_benchmark(spec: &BenchmarkSpec, out_dir: &Path) -> Result<BenchmarkOutcome> {
    if spec.runs.is_empty() {
        return Err(Error::Config("benchmark needs at least one run".into()));
    }
    spec.visibility.validate()?;
    spec.eval.validate()?;
    for run in &spec.runs {
        run.pipeline.validate()?;
    }

    let started = Instant::now();
    let data_dir = out_dir.join("dataset");
    let dataset = generate_scene_dataset(&spec.scene, &data_dir)?;
    let generation_seconds = started.elapsed().as_secs_f64();
    info!(
        "generated {} images with {} objects in {generation_seconds:.1}s",
        dataset.images.len(),
        dataset.annotations.len()
    );

    let detector = OracleDetector::new(&dataset, spec.visibility, spec.scene.seed)?;
    let image_root = data_dir.join("images");
    let mut runs = Vec::with_capacity(spec.runs.len());
    let mut timings = Vec::with_capacity(spec.runs.len());
    for (i, run) in spec.runs.iter().enumerate() {
        let t0 = Instant::now();
        let inference = infer_dataset(&dataset, &image_root, &run.pipeline, &detector).map_err(|abort| abort.error)?;
        let inference_seconds = t0.elapsed().as_secs_f64();
        let file: PathBuf = PathBuf::from(format!("predictions_{}.json", i + 1));
        save_predictions(&inference.predictions, out_dir.join(&file))?;
        let t1 = Instant::now();
        let result = evaluate(&dataset, &inference.predictions, &spec.eval)?;
        let eval_seconds = t1.elapsed().as_secs_f64();
        info!("{}: AP50 {:.3} in {inference_seconds:.1}s", run.label, result.ap50);
        runs.push(RunReport {
            label: run.label.clone(),
            pipeline: run.pipeline.clone(),
            patches: inference.report.total_patches,
            detections: inference.report.total_detections,
            predictions_file: file.to_string_lossy().into_owned(),
            result,
        });
        timings.push(RunTiming {
            label: run.label.clone(),
            inference_seconds,
            eval_seconds,
        });
    }

    let table = compare_runs(runs.iter().map(|r| (r.label.clone(), r.result.clone())).collect())?;
    let report = BenchmarkReport {
        scene: spec.scene.clone(),
        visibility: spec.visibility,
        images: dataset.images.len(),
        annotations: dataset.annotations.len(),
        runs,
    };
    write_text(&out_dir.join("report.json"), &pretty_json(&report))?;
    write_text(&out_dir.join("timings.json"), &pretty_json(&timings))?;
    write_text(&out_dir.join("table.txt"), &table.to_text())?;
    write_text(&out_dir.join("table.csv"), &table.to_csv())?;
    Ok(BenchmarkOutcome {
        report,
        table,
        timings,
        generation_seconds,
    })
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("benchmark output serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_images: usize, objects: (u32, u32)) -> SceneConfig {
        SceneConfig {
            image_size: (256, 256),
            n_images,
            objects_per_image: objects,
            seed: 11,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_scene() {
        let ds = scene_annotations(&tiny(1, (0, 0))).unwrap();
        assert_eq!(ds.images.len(), 1);
        assert!(ds.annotations.is_empty());
        let img = render_scene_image(&tiny(1, (0, 0)), &ds, &ds.images[0]);
        assert!(img.pixels().all(|p| *p == Rgb([48, 48, 48])));
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(3, (5, 10));
        generate_scene_dataset(&cfg, &dir.path().join("a")).unwrap();
        generate_scene_dataset(&cfg, &dir.path().join("b")).unwrap();
        for rel in ["annotations.json", "images/scene_0001.png", "images/scene_0003.png"] {
            let a = std::fs::read(dir.path().join("a").join(rel)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn small_objects_stay_under_1_2_percent_of_width() {
        let cfg = SceneConfig {
            n_images: 5,
            ..SceneConfig::default()
        };
        let ds = scene_annotations(&cfg).unwrap();
        assert!(!ds.annotations.is_empty());
        for a in &ds.annotations {
            assert!(a.bbox.width() / 2048.0 < 0.012 && a.bbox.height() / 2048.0 < 0.012);
        }
    }

    #[test]
    fn objects_do_not_overlap() {
        let ds = scene_annotations(&SceneConfig::preset("large", 3).unwrap()).unwrap();
        for img in ds.annotations_by_image().values() {
            for (i, a) in img.iter().enumerate() {
                for b in &img[i + 1..] {
                    assert_eq!(a.bbox.intersection_area(&b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn seam_scene_straddles_seams() {
        let cfg = SceneConfig::preset("seams", 5).unwrap();
        let ds = scene_annotations(&cfg).unwrap();
        let crossing = ds
            .annotations
            .iter()
            .filter(|a| {
                let [x0, y0, x1, y1] = a.bbox.to_xyxy();
                let cuts = |lo: f64, hi: f64| (lo / 256.0).floor() != ((hi - 1.0) / 256.0).floor();
                cuts(x0, x1) || cuts(y0, y1)
            })
            .count();
        assert!(crossing * 3 > ds.annotations.len(), "{crossing} of {}", ds.annotations.len());
    }

    #[test]
    fn pixels_match_annotations() {
        let cfg = tiny(1, (3, 3));
        let ds = scene_annotations(&cfg).unwrap();
        let img = render_scene_image(&cfg, &ds, &ds.images[0]);
        for a in &ds.annotations {
            let [x0, y0, ..] = a.bbox.to_xyxy();
            assert_eq!(img.get_pixel(x0 as u32, y0 as u32).0, category_color(a.category_id));
        }
    }

    #[test]
    fn noise_background_is_deterministic() {
        let cfg = SceneConfig {
            background: Background::Noise {
                base: [100, 100, 100],
                amplitude: 20,
            },
            ..tiny(1, (0, 0))
        };
        let ds = scene_annotations(&cfg).unwrap();
        assert_eq!(render_scene_image(&cfg, &ds, &ds.images[0]), render_scene_image(&cfg, &ds, &ds.images[0]));
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut cfg = SceneConfig::default();
        cfg.small_size_range = (30, 10);
        assert!(cfg.validate().is_err());
        let mut cfg = SceneConfig::preset("large", 0).unwrap();
        cfg.large_size_range = (200, 4000);
        assert!(cfg.validate().is_err());
        let mut cfg = SceneConfig::default();
        cfg.large_object_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn presets_exist() {
        for name in SCENE_PRESETS {
            assert!(SceneConfig::preset(name, 0).is_some());
            assert!(preset_runs(name).is_some());
        }
        assert!(SceneConfig::preset("nope", 0).is_none());
    }

    #[test]
    fn single_run_benchmark() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchmarkSpec {
            scene: SceneConfig {
                image_size: (512, 512),
                ..tiny(2, (5, 5))
            },
            visibility: VisibilityModel::default(),
            eval: EvalConfig::default(),
            runs: vec![BenchRun {
                label: "SAHI+PO".into(),
                pipeline: sahi(0.25, false),
            }],
        };
        let out = run_benchmark(&spec, dir.path()).unwrap();
        assert_eq!(out.table.rows.len(), 1);
        assert!(out.report.runs[0].result.ap50 > 0.9);
        for f in ["report.json", "table.txt", "table.csv", "timings.json", "predictions_1.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
