//! Detection metrics: matching, precision/recall, AP and mAP, PR curves,
//! confusion matrix and picking-point error statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{self, BBox};
use crate::postprocess::{Detection, DEFAULT_CONF, RIPE};

pub const MM_PER_PX: f64 = 0.78;
pub const CLASS_NAMES: [&str; 2] = ["unripe", "ripe"];
/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| 0.5 + 0.05 * k as f64)
}

/// Ground truth in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
    pub center: Option<(f64, f64)>,
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetMatch {
    pub tp: bool,
    pub gt: Option<usize>,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Aligned with the input detections.
    pub dets: Vec<DetMatch>,
    /// Per ground truth: the detection that claimed it.
    pub gts: Vec<Option<usize>>,
}

/// Greedy matching within each class: detections in descending score order
/// (ties by index) take the unmatched same-class ground truth of highest
/// IoU, and count as true positives when that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut gt_used: Vec<Option<usize>> = vec![None; gts.len()];
    let mut out = vec![
        DetMatch {
            tp: false,
            gt: None,
            iou: 0.0,
        };
        dets.len()
    ];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.class_id != d.class_id || gt_used[g].is_some() {
                continue;
            }
            let iou = geometry::iou(&d.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            out[i].iou = iou;
            if iou >= iou_thresh {
                out[i] = DetMatch {
                    tp: true,
                    gt: Some(g),
                    iou,
                };
                gt_used[g] = Some(i);
            }
        }
    }
    MatchResult { dets: out, gts: gt_used }
}

/// Precision/recall points of score-ordered TP flags.
pub fn pr_points(tp_sorted: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    tp_sorted
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            tp += t as usize;
            (tp as f64 / n_gt.max(1) as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// 101-point interpolated AP of score-ordered TP flags.
pub fn average_precision(tp_sorted: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let pts = pr_points(tp_sorted, n_gt);
    // Precision envelope: best precision at recall ≥ r.
    let mut env = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for k in (0..pts.len()).rev() {
        best = best.max(pts[k].1);
        env[k] = best;
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < pts.len() && pts[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < pts.len() {
            sum += env[k];
        }
    }
    sum / 101.0
}

/// Score-ordered TP flags and ground-truth count of one class over a set of
/// images.
fn class_flags(images: &[ImageEval], class_id: usize, iou: f64) -> (Vec<bool>, usize) {
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (im, e) in images.iter().enumerate() {
        n_gt += e.gts.iter().filter(|g| g.class_id == class_id).count();
        let m = match_detections(&e.dets, &e.gts, iou);
        for (k, (d, dm)) in e.dets.iter().zip(&m.dets).enumerate() {
            if d.class_id == class_id {
                scored.push((d.score, im, k, dm.tp));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    (scored.into_iter().map(|s| s.3).collect(), n_gt)
}

/// Picking-point error statistics over matched ripe pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterErrorStats {
    pub n: usize,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_euclidean: f64,
    pub mae: f64,
    pub pct_within_5px: f64,
    pub rmse_euclidean_mm: f64,
    pub mae_mm: f64,
}

/// Statistics of `(predicted, true)` centre pairs; `None` when empty.
pub fn center_stats(pairs: &[((f64, f64), (f64, f64))], mm_per_px: f64) -> Option<CenterErrorStats> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut se, mut within) = (0.0, 0.0, 0.0, 0usize);
    for &((px, py), (gx, gy)) in pairs {
        let (dx, dy) = (px - gx, py - gy);
        sx += dx * dx;
        sy += dy * dy;
        let e = dx.hypot(dy);
        se += e;
        within += (e <= 5.0) as usize;
    }
    let rmse_e = ((sx + sy) / n).sqrt();
    Some(CenterErrorStats {
        n: pairs.len(),
        rmse_x: (sx / n).sqrt(),
        rmse_y: (sy / n).sqrt(),
        rmse_euclidean: rmse_e,
        mae: se / n,
        pct_within_5px: 100.0 * within as f64 / n,
        rmse_euclidean_mm: px_to_mm(rmse_e, mm_per_px),
        mae_mm: px_to_mm(se / n, mm_per_px),
    })
}

pub fn px_to_mm(err_px: f64, mm_per_px: f64) -> f64 {
    err_px * mm_per_px
}

/// Centre pairs of ripe true positives at IoU ≥ 0.5 among detections at or
/// above `conf`.
pub fn center_pairs(images: &[ImageEval], conf: f64) -> Vec<((f64, f64), (f64, f64))> {
    let mut pairs = Vec::new();
    for e in images {
        let dets: Vec<Detection> = e.dets.iter().filter(|d| d.score >= conf).cloned().collect();
        let m = match_detections(&dets, &e.gts, 0.5);
        for (d, dm) in dets.iter().zip(&m.dets) {
            let Some(g) = dm.gt.filter(|_| dm.tp && d.class_id == RIPE) else { continue };
            if let (Some(p), Some(t)) = (d.center, e.gts[g].center) {
                pairs.push((p, t));
            }
        }
    }
    pairs
}

/// Row-normalised `(nc + 1)²` confusion matrix; the last row and column are
/// background. Detections at or above `conf` are matched to ground truth
/// regardless of class, highest IoU first, one to one. Class rows divide by
/// the ground-truth count of the class; the background row divides by the
/// number of unmatched detections.
pub fn confusion_matrix(images: &[ImageEval], nc: usize, iou_thresh: f64, conf: f64) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; nc + 1]; nc + 1];
    for e in images {
        let dets: Vec<&Detection> = e.dets.iter().filter(|d| d.score >= conf).collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (g, gt) in e.gts.iter().enumerate() {
            for (k, d) in dets.iter().enumerate() {
                let iou = geometry::iou(&d.bbox, &gt.bbox);
                if iou >= iou_thresh {
                    pairs.push((iou, g, k));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut g_used = vec![false; e.gts.len()];
        let mut d_used = vec![false; dets.len()];
        for (_, g, k) in pairs {
            if g_used[g] || d_used[k] {
                continue;
            }
            g_used[g] = true;
            d_used[k] = true;
            counts[e.gts[g].class_id.min(nc)][dets[k].class_id.min(nc)] += 1.0;
        }
        for (g, gt) in e.gts.iter().enumerate() {
            if !g_used[g] {
                counts[gt.class_id.min(nc)][nc] += 1.0;
            }
        }
        for (k, d) in dets.iter().enumerate() {
            if !d_used[k] {
                counts[nc][d.class_id.min(nc)] += 1.0;
            }
        }
    }
    for row in &mut counts {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub n_gt: usize,
    pub ap50: f64,
    pub ap5095: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub conf: f64,
    pub map50: f64,
    pub map5095: f64,
    pub precision: f64,
    pub recall: f64,
    pub classes: Vec<ClassMetrics>,
    /// Classes without ground truth, left out of the means.
    pub excluded_classes: Vec<usize>,
    pub confusion: Vec<Vec<f64>>,
    pub center: Option<CenterErrorStats>,
}

/// Precision and recall at IoU 0.5 for detections at or above `conf`.
pub fn precision_recall(images: &[ImageEval], class_id: Option<usize>, conf: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut n_gt) = (0usize, 0usize, 0usize);
    for e in images {
        let dets: Vec<Detection> = e
            .dets
            .iter()
            .filter(|d| d.score >= conf && class_id.is_none_or(|c| d.class_id == c))
            .cloned()
            .collect();
        n_gt += e.gts.iter().filter(|g| class_id.is_none_or(|c| g.class_id == c)).count();
        let m = match_detections(&dets, &e.gts, 0.5);
        tp += m.dets.iter().filter(|d| d.tp).count();
        fp += m.dets.iter().filter(|d| !d.tp).count();
    }
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
    (p, r)
}

/// Full report. AP uses every detection supplied; precision, recall, the
/// confusion matrix and centre errors use those scoring at least `conf`.
pub fn evaluate(images: &[ImageEval], nc: usize, conf: f64) -> MetricsReport {
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for c in 0..nc {
        let (flags, n_gt) = class_flags(images, c, 0.5);
        if n_gt == 0 {
            excluded.push(c);
            continue;
        }
        let ap50 = average_precision(&flags, n_gt);
        let ap5095 = iou_thresholds()
            .iter()
            .map(|&t| {
                let (f, n) = class_flags(images, c, t);
                average_precision(&f, n)
            })
            .sum::<f64>()
            / 10.0;
        let (precision, recall) = precision_recall(images, Some(c), conf);
        classes.push(ClassMetrics {
            class_id: c,
            name: CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()),
            n_gt,
            ap50,
            ap5095,
            precision,
            recall,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    let (precision, recall) = precision_recall(images, None, conf);
    MetricsReport {
        images: images.len(),
        conf,
        map50: mean(|c| c.ap50),
        map5095: mean(|c| c.ap5095),
        precision,
        recall,
        excluded_classes: excluded,
        confusion: confusion_matrix(images, nc, 0.5, conf),
        center: center_stats(&center_pairs(images, conf), MM_PER_PX),
        classes,
    }
}

/// Report at the default operating threshold.
pub fn evaluate_default(images: &[ImageEval], nc: usize) -> MetricsReport {
    evaluate(images, nc, DEFAULT_CONF)
}

/// `class,recall,precision` rows of the IoU-0.5 PR curve of every class.
pub fn pr_csv(images: &[ImageEval], nc: usize) -> String {
    let mut s = String::from("class,recall,precision\n");
    for c in 0..nc {
        let (flags, n_gt) = class_flags(images, c, 0.5);
        if n_gt == 0 {
            continue;
        }
        for (r, p) in pr_points(&flags, n_gt) {
            let _ = writeln!(s, "{},{r:.6},{p:.6}", CLASS_NAMES.get(c).copied().unwrap_or("other"));
        }
    }
    s
}
