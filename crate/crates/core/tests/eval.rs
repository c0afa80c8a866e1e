mod common;

use common::rng;
use rand::Rng;
use ripeloc_core::eval::{
    average_precision, center_stats, confusion_matrix, evaluate, match_detections, pr_points, precision_recall,
    px_to_mm, GroundTruth, ImageEval, MM_PER_PX,
};
use ripeloc_core::geometry::{self, BBox};
use ripeloc_core::postprocess::Detection;

fn det(class_id: usize, score: f64, bbox: BBox) -> Detection {
    Detection {
        class_id,
        score,
        bbox,
        center: None,
        level: 0,
    }
}

fn gt(class_id: usize, bbox: BBox) -> GroundTruth {
    GroundTruth {
        class_id,
        bbox,
        center: None,
    }
}

fn grid_box(k: usize) -> BBox {
    let (x, y) = ((k % 5) as f64 * 20.0, (k / 5) as f64 * 20.0);
    [x, y, x + 15.0, y + 15.0]
}

#[test]
fn eight_true_two_false_gives_precision_point_eight() {
    let gts: Vec<GroundTruth> = (0..10).map(|k| gt(0, grid_box(k))).collect();
    let mut dets: Vec<Detection> = (0..8).map(|k| det(0, 0.9, grid_box(k))).collect();
    dets.push(det(0, 0.8, [200.0, 200.0, 210.0, 210.0]));
    dets.push(det(0, 0.7, [300.0, 300.0, 310.0, 310.0]));
    let im = [ImageEval { dets, gts }];
    let (p, r) = precision_recall(&im, None, 0.0);
    assert!((p - 0.8).abs() < 1e-15);
    assert!((r - 0.8).abs() < 1e-15);
}

#[test]
fn duplicate_detection_is_a_false_positive() {
    let gts = vec![gt(1, [0.0, 0.0, 10.0, 10.0])];
    let dets = vec![det(1, 0.6, [0.5, 0.0, 10.0, 10.0]), det(1, 0.9, [0.0, 0.0, 10.0, 10.5])];
    let m = match_detections(&dets, &gts, 0.5);
    assert!(m.dets[1].tp && !m.dets[0].tp);
    assert_eq!(m.gts, vec![Some(1)]);
    // A different class never matches.
    let m = match_detections(&[det(0, 0.9, [0.0, 0.0, 10.0, 10.0])], &gts, 0.5);
    assert!(!m.dets[0].tp);
}

/// Exhaustive reference: at each step, among all unprocessed detections
/// take the highest score, then scan the full IoU matrix row.
fn oracle(dets: &[Detection], gts: &[GroundTruth], t: f64) -> Vec<bool> {
    let iou: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| geometry::iou(&d.bbox, &g.bbox)).collect())
        .collect();
    let mut done = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for _ in 0..dets.len() {
        let mut i = usize::MAX;
        for k in 0..dets.len() {
            if !done[k] && (i == usize::MAX || dets[k].score > dets[i].score) {
                i = k;
            }
        }
        done[i] = true;
        let mut best = -1.0;
        let mut arg = None;
        for g in 0..gts.len() {
            if !taken[g] && gts[g].class_id == dets[i].class_id && iou[i][g] > best {
                best = iou[i][g];
                arg = Some(g);
            }
        }
        if let Some(g) = arg.filter(|_| best >= t) {
            taken[g] = true;
            tp[i] = true;
        }
    }
    tp
}

fn random_scene(r: &mut impl Rng) -> ImageEval {
    let bx = |r: &mut dyn rand::RngCore| {
        let (x, y) = (r.random_range(0.0..60.0), r.random_range(0.0..60.0));
        [x, y, x + r.random_range(5.0..30.0), y + r.random_range(5.0..30.0)]
    };
    let gts: Vec<GroundTruth> = (0..r.random_range(0..6)).map(|_| gt(r.random_range(0..2), bx(r))).collect();
    let mut dets = Vec::new();
    for g in &gts {
        if r.random_bool(0.8) {
            let j = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            dets.push(det(
                if r.random_bool(0.85) { g.class_id } else { 1 - g.class_id },
                r.random::<f64>(),
                [g.bbox[0] + j[0], g.bbox[1] + j[1], g.bbox[2] + j[0], g.bbox[3] + j[1]],
            ));
        }
    }
    for _ in 0..r.random_range(0..4) {
        dets.push(det(r.random_range(0..2), r.random::<f64>(), bx(r)));
    }
    ImageEval { dets, gts }
}

#[test]
fn greedy_matcher_equals_exhaustive_oracle() {
    let mut r = rng(1);
    for _ in 0..500 {
        let s = random_scene(&mut r);
        for t in [0.3, 0.5, 0.75] {
            let m = match_detections(&s.dets, &s.gts, t);
            let tp: Vec<bool> = m.dets.iter().map(|d| d.tp).collect();
            assert_eq!(tp, oracle(&s.dets, &s.gts, t));
        }
    }
}

#[test]
fn ap_trivial_cases() {
    assert_eq!(average_precision(&[true, true, true], 3), 1.0);
    assert_eq!(average_precision(&[], 4), 0.0);
    assert_eq!(average_precision(&[false, false], 4), 0.0);
}

/// Exact area under the precision envelope.
fn exact_ap(flags: &[bool], n_gt: usize) -> f64 {
    let pts = pr_points(flags, n_gt);
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for k in 0..pts.len() {
        let env = pts[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        area += (pts[k].0 - prev_r) * env;
        prev_r = pts[k].0;
    }
    area
}

#[test]
fn ap_matches_exact_envelope_integration() {
    let mut r = rng(2);
    for _ in 0..50 {
        let n_gt = r.random_range(1..15);
        let n = r.random_range(0..25);
        let mut tp_left = n_gt;
        let flags: Vec<bool> = (0..n)
            .map(|_| {
                let t = tp_left > 0 && r.random_bool(0.6);
                tp_left -= t as usize;
                t
            })
            .collect();
        let (a, b) = (average_precision(&flags, n_gt), exact_ap(&flags, n_gt));
        assert!((a - b).abs() <= 0.01, "101-point {a} exact {b}");
    }
}

#[test]
fn removing_a_false_positive_never_lowers_ap() {
    let mut r = rng(3);
    for _ in 0..300 {
        let flags: Vec<bool> = (0..20).map(|_| r.random_bool(0.5)).collect();
        let n_gt = flags.iter().filter(|&&f| f).count() + 2;
        for k in (0..20).filter(|&k| !flags[k]) {
            let mut less = flags.clone();
            less.remove(k);
            assert!(average_precision(&less, n_gt) >= average_precision(&flags, n_gt) - 1e-15);
        }
    }
}

#[test]
fn map50_bounds_map5095() {
    let mut r = rng(4);
    for _ in 0..30 {
        let images: Vec<ImageEval> = (0..5).map(|_| random_scene(&mut r)).collect();
        let rep = evaluate(&images, 2, 0.4);
        assert!(rep.map50 >= rep.map5095 - 1e-12);
        for c in &rep.classes {
            assert!(c.ap50 >= c.ap5095 - 1e-12);
        }
    }
}

#[test]
fn absent_class_is_excluded() {
    let images = vec![ImageEval {
        dets: vec![det(1, 0.9, [0.0, 0.0, 10.0, 10.0])],
        gts: vec![gt(1, [0.0, 0.0, 10.0, 10.0])],
    }];
    let rep = evaluate(&images, 2, 0.4);
    assert_eq!(rep.excluded_classes, vec![0]);
    assert_eq!(rep.classes.len(), 1);
    assert_eq!(rep.map50, 1.0);
}

#[test]
fn confusion_matrix_cases() {
    let gts = vec![gt(0, [0.0, 0.0, 10.0, 10.0]), gt(1, [20.0, 20.0, 30.0, 30.0])];
    let perfect = vec![ImageEval {
        dets: vec![det(0, 0.9, [0.0, 0.0, 10.0, 10.0]), det(1, 0.9, [20.0, 20.0, 30.0, 30.0])],
        gts: gts.clone(),
    }];
    let m = confusion_matrix(&perfect, 2, 0.5, 0.4);
    assert_eq!(m[0], vec![1.0, 0.0, 0.0]);
    assert_eq!(m[1], vec![0.0, 1.0, 0.0]);
    let mislabel = vec![ImageEval {
        dets: vec![det(0, 0.9, [20.0, 20.0, 30.0, 30.0]), det(1, 0.9, [50.0, 50.0, 60.0, 60.0])],
        gts: gts.clone(),
    }];
    let m = confusion_matrix(&mislabel, 2, 0.5, 0.4);
    assert_eq!(m[1], vec![1.0, 0.0, 0.0]);
    assert_eq!(m[0], vec![0.0, 0.0, 1.0]);
    assert_eq!(m[2], vec![0.0, 1.0, 0.0]);

    let mut r = rng(5);
    let images: Vec<ImageEval> = (0..40).map(|_| random_scene(&mut r)).collect();
    let m = confusion_matrix(&images, 2, 0.5, 0.3);
    for row in &m[..2] {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn center_statistics() {
    let s = center_stats(&[((12.0, 9.0), (9.0, 5.0))], MM_PER_PX).unwrap();
    assert!((s.rmse_euclidean - 5.0).abs() < 1e-15);
    assert_eq!((s.rmse_x, s.rmse_y), (3.0, 4.0));
    let same = center_stats(&[((1.0, 2.0), (1.0, 2.0)); 4], MM_PER_PX).unwrap();
    assert_eq!((same.rmse_euclidean, same.mae, same.pct_within_5px), (0.0, 0.0, 100.0));
    assert!(center_stats(&[], MM_PER_PX).is_none());

    let mut r = rng(6);
    for _ in 0..100 {
        let pairs: Vec<_> = (0..r.random_range(1..50))
            .map(|_| {
                (
                    (r.random_range(0.0..100.0), r.random_range(0.0..100.0)),
                    (r.random_range(0.0..100.0), r.random_range(0.0..100.0)),
                )
            })
            .collect();
        let s = center_stats(&pairs, MM_PER_PX).unwrap();
        let n = pairs.len() as f64;
        let sq: f64 = pairs.iter().map(|((a, b), (c, d))| (a - c).powi(2) + (b - d).powi(2)).sum();
        let mae: f64 = pairs.iter().map(|((a, b), (c, d))| ((a - c).powi(2) + (b - d).powi(2)).sqrt()).sum::<f64>() / n;
        assert!((s.rmse_euclidean - (sq / n).sqrt()).abs() <= 1e-12);
        assert!((s.mae - mae).abs() <= 1e-12);
        assert!((s.rmse_x.powi(2) + s.rmse_y.powi(2) - s.rmse_euclidean.powi(2)).abs() <= 1e-9);
    }
}

#[test]
fn pixel_to_millimetre_projection() {
    assert!((px_to_mm(4.86, MM_PER_PX) - 3.7908).abs() < 1e-12);
    assert!((px_to_mm(4.86, MM_PER_PX) - 3.80).abs() <= 0.02);
    assert!((px_to_mm(3.42, MM_PER_PX) - 2.67).abs() <= 0.02);
    assert_eq!(px_to_mm(0.0, MM_PER_PX), 0.0);
}

#[test]
fn report_serialises_to_json() {
    let mut r = rng(7);
    let images: Vec<ImageEval> = (0..5).map(|_| random_scene(&mut r)).collect();
    let rep = evaluate(&images, 2, 0.4);
    let js = serde_json::to_string(&rep).unwrap();
    let back: ripeloc_core::eval::MetricsReport = serde_json::from_str(&js).unwrap();
    assert_eq!(back.classes.len(), rep.classes.len());
    let csv = ripeloc_core::eval::pr_csv(&images, 2);
    assert!(csv.starts_with("class,recall,precision\n"));
}
