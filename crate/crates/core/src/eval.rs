//! COCO-protocol AP at a single IoU threshold, with size-bin breakdown.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coco::{Annotation, CocoDataset, PredictionRecord};
use crate::error::{Error, Result};

/// Half-open area interval `[lo, hi)` in squared pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBins {
    pub small: AreaRange,
    pub medium: AreaRange,
    pub large: AreaRange,
}

impl Default for SizeBins {
    fn default() -> Self {
        Self {
            small: AreaRange { lo: 0.0, hi: 32.0 * 32.0 },
            medium: AreaRange {
                lo: 32.0 * 32.0,
                hi: 96.0 * 96.0,
            },
            large: AreaRange {
                lo: 96.0 * 96.0,
                hi: f64::INFINITY,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Per image, across all categories.
    pub max_detections: usize,
    #[serde(skip)]
    pub size_bins: SizeBins,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_detections: 500,
            size_bins: SizeBins::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max detections must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tallies over the unrestricted size range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Non-crowd ground truth boxes.
    pub gt: usize,
    pub gt_matched: usize,
    pub gt_missed: usize,
    /// Predictions that survived the per-image cap.
    pub predictions: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    /// Predictions matched to crowd regions.
    pub ignored_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50: f64,
    /// `None` when the bin holds no ground truth.
    pub ap50_small: Option<f64>,
    pub ap50_medium: Option<f64>,
    pub ap50_large: Option<f64>,
    /// Categories without ground truth are left out.
    pub per_category_ap: BTreeMap<u64, f64>,
    pub counts: EvalCounts,
}

/// Matching outcome of one (image, category) pair for one area range.
#[derive(Debug, Default)]
struct Matched {
    scores: Vec<f64>,
    tp: Vec<bool>,
    ignored: Vec<bool>,
    n_gt: usize,
}

fn iou_for(dt: &PredictionRecord, gt: &Annotation) -> f64 {
    let inter = dt.bbox.intersection_area(&gt.bbox);
    let union = if gt.iscrowd {
        dt.bbox.area()
    } else {
        dt.bbox.area() + gt.bbox.area() - inter
    };
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn match_image(gts: &[&Annotation], dts: &[&PredictionRecord], range: AreaRange, iou_threshold: f64) -> Matched {
    // Non-ignored ground truth first, so a regular match always wins over an ignored one.
    let mut gts: Vec<(&Annotation, bool)> = gts
        .iter()
        .map(|g| (*g, g.iscrowd || !range.contains(g.area)))
        .collect();
    gts.sort_by_key(|(_, ignore)| *ignore);

    let threshold = iou_threshold.min(1.0 - 1e-10);
    let mut gt_taken = vec![false; gts.len()];
    let mut out = Matched {
        n_gt: gts.iter().filter(|(_, ig)| !ig).count(),
        ..Matched::default()
    };
    for dt in dts {
        let mut best: Option<usize> = None;
        let mut best_iou = threshold;
        for (g, (gt, ignore)) in gts.iter().enumerate() {
            if gt_taken[g] && !gt.iscrowd {
                continue;
            }
            if let Some(m) = best {
                if !gts[m].1 && *ignore {
                    break;
                }
            }
            let iou = iou_for(dt, gt);
            if iou < best_iou {
                continue;
            }
            best_iou = iou;
            best = Some(g);
        }
        out.scores.push(dt.score);
        match best {
            Some(m) => {
                gt_taken[m] = true;
                out.tp.push(true);
                out.ignored.push(gts[m].1);
            }
            None => {
                out.tp.push(false);
                out.ignored.push(!range.contains(dt.bbox.area()));
            }
        }
    }
    out
}

/// Recall thresholds 0, 0.01, ..., 1 computed the way numpy's `linspace` does.
fn recall_thresholds() -> [f64; 101] {
    let mut t = [0.0; 101];
    for (i, v) in t.iter_mut().enumerate() {
        *v = i as f64 * 0.01;
    }
    t[100] = 1.0;
    t
}

/// 101-point interpolated AP over one category's pooled matches, or `None`
/// when there is no ground truth to recall.
fn category_ap(parts: &[&Matched]) -> Option<f64> {
    let n_gt: usize = parts.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, bool, bool)> = parts
        .iter()
        .flat_map(|m| (0..m.scores.len()).map(|i| (m.scores[i], m.tp[i], m.ignored[i])))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut recall = Vec::with_capacity(pooled.len());
    let mut precision = Vec::with_capacity(pooled.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp, ignored) in pooled {
        if !ignored {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 });
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let total: f64 = recall_thresholds()
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / 101.0)
}

fn check_references(gt: &CocoDataset, predictions: &[PredictionRecord]) -> Result<()> {
    let images: HashSet<u64> = gt.images.iter().map(|i| i.id).collect();
    let categories: HashSet<u64> = gt.categories.iter().map(|c| c.id).collect();
    for (index, p) in predictions.iter().enumerate() {
        if !images.contains(&p.image_id) {
            return Err(Error::DanglingPredictionImage {
                index,
                image_id: p.image_id,
            });
        }
        if !categories.contains(&p.category_id) {
            return Err(Error::DanglingPredictionCategory {
                index,
                category_id: p.category_id,
            });
        }
    }
    Ok(())
}

/// Evaluates `predictions` against `gt` at one IoU threshold.
pub fn evaluate(gt: &CocoDataset, predictions: &[PredictionRecord], config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    gt.validate()?;
    check_references(gt, predictions)?;

    let gt_by_image = gt.annotations_by_image();
    let mut dt_by_image: BTreeMap<u64, Vec<&PredictionRecord>> = BTreeMap::new();
    for p in predictions {
        dt_by_image.entry(p.image_id).or_default().push(p);
    }
    for dts in dt_by_image.values_mut() {
        dts.sort_by(|a, b| b.score.total_cmp(&a.score));
        dts.truncate(config.max_detections);
    }

    let bins = config.size_bins;
    let ranges = [AreaRange::ALL, bins.small, bins.medium, bins.large];
    let category_ids: Vec<u64> = {
        let mut ids: Vec<u64> = gt.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    };
    let image_ids: Vec<u64> = {
        let mut ids: Vec<u64> = gt.images.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ids
    };

    // per_image[i][range][category index]
    let per_image: Vec<Vec<Vec<Matched>>> = image_ids
        .par_iter()
        .map(|image_id| {
            let gts: &[&Annotation] = gt_by_image.get(image_id).map(Vec::as_slice).unwrap_or(&[]);
            let dts: &[&PredictionRecord] = dt_by_image.get(image_id).map(Vec::as_slice).unwrap_or(&[]);
            ranges
                .iter()
                .map(|range| {
                    category_ids
                        .iter()
                        .map(|cat| {
                            let g: Vec<&Annotation> = gts.iter().copied().filter(|a| a.category_id == *cat).collect();
                            let d: Vec<&PredictionRecord> =
                                dts.iter().copied().filter(|p| p.category_id == *cat).collect();
                            match_image(&g, &d, *range, config.iou_threshold)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let range_ap = |r: usize| -> (Option<f64>, BTreeMap<u64, f64>) {
        let mut per_cat = BTreeMap::new();
        for (c, cat) in category_ids.iter().enumerate() {
            let parts: Vec<&Matched> = per_image.iter().map(|img| &img[r][c]).collect();
            if let Some(ap) = category_ap(&parts) {
                per_cat.insert(*cat, ap);
            }
        }
        let mean = (!per_cat.is_empty()).then(|| per_cat.values().sum::<f64>() / per_cat.len() as f64);
        (mean, per_cat)
    };

    let (ap50, per_category_ap) = range_ap(0);
    let mut counts = EvalCounts::default();
    for img in &per_image {
        for m in &img[0] {
            counts.gt += m.n_gt;
            counts.predictions += m.scores.len();
            for (tp, ignored) in m.tp.iter().zip(&m.ignored) {
                match (tp, ignored) {
                    (true, false) => counts.true_positives += 1,
                    (false, _) => counts.false_positives += 1,
                    (true, true) => counts.ignored_predictions += 1,
                }
            }
        }
    }
    counts.gt_matched = counts.true_positives;
    counts.gt_missed = counts.gt - counts.gt_matched;

    Ok(EvalResult {
        ap50: ap50.unwrap_or(0.0),
        ap50_small: range_ap(1).0,
        ap50_medium: range_ap(2).0,
        ap50_large: range_ap(3).0,
        per_category_ap,
        counts,
    })
}

/// AP table for several labelled runs, with deltas against the first row.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<(String, EvalResult)>,
}

fn fmt_ap(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.decimals$}"))
}

impl ComparisonTable {
    fn has_delta(&self) -> bool {
        self.rows.len() > 1
    }

    fn delta(&self, row: usize) -> f64 {
        self.rows[row].1.ap50 - self.rows[0].1.ap50
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["config", "AP50", "AP50s", "AP50m", "AP50l"];
        if self.has_delta() {
            header.push("dAP50");
        }
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, (label, r))| {
                let mut cells = vec![
                    label.clone(),
                    format!("{:.3}", r.ap50),
                    fmt_ap(r.ap50_small, 3),
                    fmt_ap(r.ap50_medium, 3),
                    fmt_ap(r.ap50_large, 3),
                ];
                if self.has_delta() {
                    cells.push(format!("{:+.3}", self.delta(i)));
                }
                cells
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| body.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        for row in &body {
            line(row);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,ap50,ap50_small,ap50_medium,ap50_large");
        if self.has_delta() {
            out.push_str(",delta_ap50");
        }
        out.push('\n');
        for (i, (label, r)) in self.rows.iter().enumerate() {
            let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
            let label = if label.contains([',', '"']) {
                format!("\"{}\"", label.replace('"', "\"\""))
            } else {
                label.clone()
            };
            let _ = write!(
                out,
                "{label},{:.6},{},{},{}",
                r.ap50,
                opt(r.ap50_small),
                opt(r.ap50_medium),
                opt(r.ap50_large)
            );
            if self.has_delta() {
                let _ = write!(out, ",{:+.6}", self.delta(i));
            }
            out.push('\n');
        }
        out
    }
}

pub fn compare_runs(results: Vec<(String, EvalResult)>) -> Result<ComparisonTable> {
    if results.is_empty() {
        return Err(Error::Config("compare needs at least one run".into()));
    }
    Ok(ComparisonTable { rows: results })
}
