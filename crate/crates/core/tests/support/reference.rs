// Straightforward re-implementations used as test oracles, plus random
// instance generators shared by several test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use slicekit::bbox::BBox;
use slicekit::coco::{Annotation, Category, CocoDataset, Detection, DetectionSource, ImageRecord, PredictionRecord};

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn overlap(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w > 0.0 && h > 0.0 {
        w * h
    } else {
        0.0
    }
}

pub fn plain_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = overlap(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// True when `a` ranks strictly before `b`: higher score first, then the
/// smaller left edge, top edge, category, right edge, bottom edge, source.
fn ranks_before(a: &Detection, b: &Detection) -> bool {
    let (ka, kb) = (a.bbox.to_xyxy(), b.bbox.to_xyxy());
    let key = |d: &Detection, k: [f64; 4]| (d.category_id, k);
    if a.score != b.score {
        return a.score > b.score;
    }
    let ((ca, ba), (cb, bb)) = (key(a, ka), key(b, kb));
    for (x, y) in [(ba[0], bb[0]), (ba[1], bb[1])] {
        if x != y {
            return x < y;
        }
    }
    if ca != cb {
        return ca < cb;
    }
    for (x, y) in [(ba[2], bb[2]), (ba[3], bb[3])] {
        if x != y {
            return x < y;
        }
    }
    a.source < b.source
}

/// Selection-based NMS: repeatedly take the best remaining detection and
/// drop everything it suppresses.
pub fn reference_nms(dets: &[Detection], t_m: f64, t_d: f64, class_aware: bool) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets.iter().filter(|d| d.score >= t_d).cloned().collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if ranks_before(&pool[i], &pool[best]) {
                best = i;
            }
        }
        let top = pool.swap_remove(best);
        let tb = top.bbox.to_xyxy();
        pool.retain(|d| {
            let same_class = !class_aware || d.category_id == top.category_id;
            !(same_class && plain_iou(&tb, &d.bbox.to_xyxy()) > t_m)
        });
        kept.push(top);
    }
    kept
}

/// Pairwise check of the keep rule on a finished output: a candidate is kept
/// iff no kept detection ranked before it suppresses it.
pub fn keep_rule_holds(input: &[Detection], output: &[Detection], t_m: f64, t_d: f64, class_aware: bool) -> bool {
    input.iter().filter(|d| d.score >= t_d).all(|d| {
        let suppressed = output.iter().any(|k| {
            ranks_before(k, d)
                && (!class_aware || k.category_id == d.category_id)
                && plain_iou(&k.bbox.to_xyxy(), &d.bbox.to_xyxy()) > t_m
        });
        output.contains(d) != suppressed
    })
}

/// Detections on a coarse integer lattice so that exact ties, duplicates and
/// IoU values of exactly 0.5 come up often.
pub fn random_detections<R: Rng>(rng: &mut R, n: usize) -> Vec<Detection> {
    let scores = [0.1, 0.3, 0.5, 0.5, 0.7, 0.9, 1.0];
    (0..n)
        .map(|i| {
            let x = f64::from(rng.random_range(0..8u32)) * 5.0;
            let y = f64::from(rng.random_range(0..8u32)) * 5.0;
            let w = f64::from(rng.random_range(1..5u32)) * 5.0;
            let h = f64::from(rng.random_range(1..5u32)) * 5.0;
            Detection {
                category_id: rng.random_range(1..=2),
                score: scores[rng.random_range(0..scores.len())],
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                source: if i % 5 == 0 {
                    DetectionSource::FullImage
                } else {
                    DetectionSource::Patch(rng.random_range(0..4))
                },
            }
        })
        .collect()
}

// ----- COCO protocol -----

pub const RANGES: [(f64, f64); 4] = [
    (0.0, f64::INFINITY),
    (0.0, 1024.0),
    (1024.0, 9216.0),
    (9216.0, f64::INFINITY),
];

struct Row {
    score: f64,
    image_rank: usize,
    position: usize,
    tp: bool,
    ignore: bool,
}

/// AP at one IoU threshold for one area range `[lo, hi)`, averaged over
/// categories that have ground truth in range. `None` if no category does.
pub fn reference_ap(
    gt: &CocoDataset,
    preds: &[PredictionRecord],
    iou_threshold: f64,
    max_dets: usize,
    range: (f64, f64),
) -> Option<f64> {
    let in_range = |a: f64| a >= range.0 && a < range.1;
    let mut image_ids: Vec<u64> = gt.images.iter().map(|i| i.id).collect();
    image_ids.sort();
    let mut cats: Vec<u64> = gt.categories.iter().map(|c| c.id).collect();
    cats.sort();

    // Cap per image across categories, keeping input order among equal scores.
    let mut capped: BTreeMap<u64, Vec<&PredictionRecord>> = BTreeMap::new();
    for &img in &image_ids {
        let mut mine: Vec<(usize, &PredictionRecord)> =
            preds.iter().enumerate().filter(|(_, p)| p.image_id == img).collect();
        mine.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        capped.insert(img, mine.into_iter().take(max_dets).map(|(_, p)| p).collect());
    }

    let mut aps = Vec::new();
    for &cat in &cats {
        let mut rows: Vec<Row> = Vec::new();
        let mut n_gt = 0usize;
        for (image_rank, &img) in image_ids.iter().enumerate() {
            let gts: Vec<&Annotation> = gt
                .annotations
                .iter()
                .filter(|a| a.image_id == img && a.category_id == cat)
                .collect();
            let ignored: Vec<bool> = gts.iter().map(|g| g.iscrowd || !in_range(g.area)).collect();
            n_gt += ignored.iter().filter(|i| !**i).count();
            let mut taken = vec![false; gts.len()];
            let dts = capped[&img].iter().filter(|p| p.category_id == cat);
            for (position, dt) in dts.enumerate() {
                let d = dt.bbox.to_xyxy();
                let candidate = |want_ignored: bool, taken: &[bool]| -> Option<usize> {
                    let mut best: Option<(usize, f64)> = None;
                    for (g, ann) in gts.iter().enumerate() {
                        if ignored[g] != want_ignored || (taken[g] && !ann.iscrowd) {
                            continue;
                        }
                        let gb = ann.bbox.to_xyxy();
                        let iou = if ann.iscrowd {
                            overlap(&d, &gb) / area(&d)
                        } else {
                            plain_iou(&d, &gb)
                        };
                        // later ground truth wins exact ties
                        if iou >= iou_threshold.min(1.0 - 1e-10) && best.is_none_or(|(_, b)| iou >= b) {
                            best = Some((g, iou));
                        }
                    }
                    best.map(|(g, _)| g)
                };
                let hit = candidate(false, &taken).or_else(|| candidate(true, &taken));
                let (tp, ignore) = match hit {
                    Some(g) => {
                        taken[g] = true;
                        (true, ignored[g])
                    }
                    None => (false, !in_range(area(&d))),
                };
                rows.push(Row {
                    score: dt.score,
                    image_rank,
                    position,
                    tp,
                    ignore,
                });
            }
        }
        if n_gt == 0 {
            continue;
        }
        rows.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.image_rank.cmp(&b.image_rank))
                .then(a.position.cmp(&b.position))
        });
        let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
        let (mut tp, mut fp) = (0.0f64, 0.0f64);
        for r in &rows {
            if !r.ignore {
                if r.tp {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            points.push((tp / n_gt as f64, precision));
        }
        // Recall levels as numpy.linspace(0, 1, 101) produces them.
        let mut sum = 0.0;
        for i in 0..=100 {
            let level = if i == 100 { 1.0 } else { i as f64 * 0.01 };
            let best = points
                .iter()
                .filter(|(r, _)| *r >= level)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            sum += best;
        }
        aps.push(sum / 101.0);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// A small random evaluation problem: up to 10 images, up to 30 ground-truth
/// boxes across three categories and every size bin, some crowd regions, and
/// predictions made of jittered hits, duplicates and pure false positives.
pub fn random_eval_instance<R: Rng>(rng: &mut R) -> (CocoDataset, Vec<PredictionRecord>) {
    let n_images = rng.random_range(1..=10u64);
    let images = (1..=n_images)
        .map(|id| ImageRecord::new(id, format!("{id}.png"), 400, 400))
        .collect();
    let categories = (1..=3)
        .map(|id| Category {
            id,
            name: format!("c{id}"),
            supercategory: None,
        })
        .collect();
    let sides = [6.0, 12.0, 20.0, 31.0, 32.0, 40.0, 60.0, 95.0, 96.0, 120.0];
    let n_gt = rng.random_range(0..=30u64);
    let mut annotations = Vec::new();
    for id in 1..=n_gt {
        let w = sides[rng.random_range(0..sides.len())];
        let h = sides[rng.random_range(0..sides.len())];
        let x = f64::from(rng.random_range(0..(400 - w as u32)));
        let y = f64::from(rng.random_range(0..(400 - h as u32)));
        let mut a = Annotation::new(
            id,
            rng.random_range(1..=n_images),
            rng.random_range(1..=3),
            BBox::new(x, y, x + w, y + h).unwrap(),
        );
        a.iscrowd = rng.random_bool(0.1);
        annotations.push(a);
    }
    let scores = [0.2, 0.4, 0.5, 0.6, 0.8, 0.95];
    let mut preds = Vec::new();
    for a in &annotations {
        let copies = rng.random_range(0..=2);
        for _ in 0..copies {
            let [x0, y0, x1, y1] = a.bbox.to_xyxy();
            let j = |rng: &mut R, v: f64| v + f64::from(rng.random_range(-4..=4i32));
            let (nx0, ny0) = (j(rng, x0), j(rng, y0));
            let (nx1, ny1) = (j(rng, x1).max(nx0 + 1.0), j(rng, y1).max(ny0 + 1.0));
            preds.push(PredictionRecord {
                image_id: a.image_id,
                category_id: if rng.random_bool(0.85) { a.category_id } else { rng.random_range(1..=3) },
                bbox: BBox::new(nx0, ny0, nx1, ny1).unwrap(),
                score: scores[rng.random_range(0..scores.len())],
            });
        }
    }
    for _ in 0..rng.random_range(0..=10) {
        let w = sides[rng.random_range(0..sides.len())];
        let x = f64::from(rng.random_range(0..300u32));
        let y = f64::from(rng.random_range(0..300u32));
        preds.push(PredictionRecord {
            image_id: rng.random_range(1..=n_images),
            category_id: rng.random_range(1..=3),
            bbox: BBox::new(x, y, x + w, y + w).unwrap(),
            score: scores[rng.random_range(0..scores.len())],
        });
    }
    (
        CocoDataset {
            images,
            annotations,
            categories,
        },
        preds,
    )
}
