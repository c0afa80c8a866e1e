mod common;

use common::{randn, rng};
use rand::Rng;
use ripeloc_core::geometry::{self, softmax};
use ripeloc_core::loss::{
    assign_targets, bce, bce_mean, box_losses, ciou, ciou_with_grad, dfl, dfl_grad, total_loss, BoxTarget, GtBox,
    ClsNorm, LossConfig, ScaleGeom,
};
use ripeloc_core::model::{build_model, ModelConfig};
use ripeloc_core::params::ParamKind;
use ripeloc_tensor::gradcheck::{self, FD_EPS};
use ripeloc_tensor::{sigmoid, Mode, Tape, Tensor};

const GEOMS: [ScaleGeom; 3] = [
    ScaleGeom { stride: 8, size: 12 },
    ScaleGeom { stride: 16, size: 6 },
    ScaleGeom { stride: 32, size: 3 },
];

#[test]
fn bce_examples() {
    assert!((bce_mean(&[0.0], &[1.0]) - 2f64.ln()).abs() < 1e-15);
    let big = bce_mean(&[40.0], &[1.0]);
    assert!(big.is_finite() && big < 1e-16);
    assert!(bce_mean(&[-800.0, 800.0], &[0.0, 1.0]).is_finite());
}

#[test]
fn bce_matches_direct_formula() {
    let mut r = rng(1);
    let z: Vec<f64> = (0..500).map(|_| r.random_range(-8.0..8.0)).collect();
    let y: Vec<f64> = (0..500).map(|_| f64::from(r.random_bool(0.5) as u8)).collect();
    let direct: f64 = z
        .iter()
        .zip(&y)
        .map(|(&z, &y)| -(y * sigmoid(z).ln() + (1.0 - y) * (1.0 - sigmoid(z)).ln()))
        .sum::<f64>()
        / 500.0;
    assert!((bce_mean(&z, &y) - direct).abs() <= 1e-10);
    let mut rev: Vec<(f64, f64)> = z.iter().copied().zip(y.iter().copied()).collect();
    rev.reverse();
    let (zr, yr): (Vec<f64>, Vec<f64>) = rev.into_iter().unzip();
    assert!((bce_mean(&zr, &yr) - bce_mean(&z, &y)).abs() < 1e-12);
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let x = randn(&[2, 2, 3, 3], &mut r);
    let y: Vec<f64> = (0..36).map(|i| f64::from((i % 3 == 0) as u8)).collect();
    let rep = gradcheck::check(&[scaled(x.clone(), 4.0)], 36, FD_EPS, |tape, v| {
        Ok(bce(tape, v[0], y.clone()).unwrap())
    })
    .unwrap();
    common::assert_grad("bce", rep);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[4]));
    assert!(bce(&mut tape, v, vec![0.0; 3]).is_err());
}

#[test]
fn ciou_examples() {
    let a = [3.0, 4.0, 10.0, 12.5];
    assert!(ciou(&a, &a).abs() < 1e-12);
    assert!((geometry::iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
    // Same-shape offset boxes: α·v vanishes, leaving 1 − IoU + ρ²/c².
    let l = ciou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]);
    assert!((l - (1.0 - 1.0 / 7.0 + 2.0 / 18.0)).abs() < 1e-8, "{l}");
}

#[test]
fn ciou_range_and_zero_only_at_identity() {
    let mut r = rng(3);
    for _ in 0..2000 {
        let mut b = || {
            let (x, y) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
            [x, y, x + r.random_range(0.1..6.0), y + r.random_range(0.1..6.0)]
        };
        let (p, g) = (b(), b());
        let l = ciou(&p, &g);
        assert!((0.0..2.0 + 1.0).contains(&l), "{l}");
        assert!(l > 1e-9);
    }
}

#[test]
fn ciou_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let mut b = || {
            let (x, y) = (r.random_range(0.0..4.0), r.random_range(0.0..4.0));
            [x, y, x + r.random_range(0.5..5.0), y + r.random_range(0.5..5.0)]
        };
        let (p, g) = (b(), b());
        let (_, grad) = ciou_with_grad(&p, &g);
        for k in 0..4 {
            let h = 1e-6;
            let (mut a, mut c) = (p, p);
            a[k] += h;
            c[k] -= h;
            let num = (ciou(&a, &g) - ciou(&c, &g)) / (2.0 * h);
            // Skip the measure-zero kinks where overlap edges coincide.
            let kink = p.iter().any(|&u| g.iter().any(|&v| (u - v).abs() < 1e-4));
            if kink {
                continue;
            }
            let e = (grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(1e-6);
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-4, "worst rel err {worst:.3e}");
}

#[test]
fn dfl_examples() {
    let mut z = vec![0.0; 16];
    z[5] = 60.0;
    assert!(dfl(&z, 5.0) < 1e-20);
    let u = vec![0.3; 16];
    for t in [0.0, 2.5, 7.25, 14.9, 15.0] {
        assert!((dfl(&u, t) - 16f64.ln()).abs() < 1e-12, "t={t}");
    }
    // Out-of-range targets are clamped rather than indexing past the bins.
    assert!((dfl(&u, 20.0) - 16f64.ln()).abs() < 1e-12);
    assert!((dfl(&u, -3.0) - 16f64.ln()).abs() < 1e-12);
}

#[test]
fn dfl_gradient_matches_finite_differences() {
    let mut r = rng(5);
    for _ in 0..50 {
        let z: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
        let t = r.random_range(0.0..15.0);
        let g = dfl_grad(&z, t);
        for k in 0..16 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let num = (dfl(&a, t) - dfl(&b, t)) / 2e-6;
            assert!((g[k] - num).abs() < 1e-8);
        }
    }
}

#[test]
fn dfl_descent_reaches_target() {
    let mut r = rng(6);
    for _ in 0..20 {
        let t = r.random_range(0.0..15.0);
        let mut z = vec![0.0; 16];
        let mut vel = vec![0.0; 16];
        for _ in 0..500 {
            let g = dfl_grad(&z, t);
            for k in 0..16 {
                vel[k] = 0.9 * vel[k] - g[k];
                z[k] += vel[k];
            }
        }
        let e: f64 = softmax(&z).iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        assert!((e - t).abs() <= 0.05, "target {t} decoded {e}");
    }
}

fn scaled(mut t: Tensor, c: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}

fn gt(class_id: usize, b: [f64; 4]) -> GtBox {
    GtBox { class_id, bbox: b }
}

#[test]
fn single_cell_box_assigns_only_that_cell() {
    let a = assign_targets(&[gt(1, [8.0, 8.0, 16.0, 16.0])], &GEOMS, 16, 10).unwrap();
    assert_eq!(a.matches.len(), 1);
    let m = &a.matches[0];
    assert_eq!((m.scale, m.row, m.col, m.class_id), (0, 1, 1, 1));
    assert_eq!(m.dist, [0.5; 4]);
    let assigned: usize = a.cells.iter().flatten().filter(|c| c.is_some()).count();
    assert_eq!(assigned, 1);
    assert_eq!(a.cells[0][12 + 1], Some(0));
}

#[test]
fn disjoint_boxes_get_disjoint_cells() {
    let a = assign_targets(
        &[gt(0, [2.0, 2.0, 40.0, 40.0]), gt(1, [50.0, 44.0, 94.0, 90.0])],
        &GEOMS,
        16,
        10,
    )
    .unwrap();
    let of = |g: usize| -> Vec<(usize, usize, usize)> {
        a.matches.iter().filter(|m| m.gt == g).map(|m| (m.scale, m.row, m.col)).collect()
    };
    let (x, y) = (of(0), of(1));
    assert!(!x.is_empty() && !y.is_empty());
    assert!(x.iter().all(|c| !y.contains(c)));
    assert!(x.len() <= 30 && y.len() <= 30);
}

#[test]
fn zero_area_ground_truth_is_rejected() {
    assert!(assign_targets(&[gt(0, [5.0, 5.0, 5.0, 9.0])], &GEOMS, 16, 10).is_err());
}

#[test]
fn assigned_cells_lie_inside_their_boxes() {
    let mut r = rng(7);
    for _ in 0..1000 {
        let n = r.random_range(1..8);
        let gts: Vec<GtBox> = (0..n)
            .map(|_| {
                let (w, h) = (r.random_range(2.0..80.0), r.random_range(2.0..80.0));
                let (x, y) = (r.random_range(0.0..96.0 - w), r.random_range(0.0..96.0 - h));
                gt(r.random_range(0..2), [x, y, x + w, y + h])
            })
            .collect();
        let a = assign_targets(&gts, &GEOMS, 16, 10).unwrap();
        let mut seen = std::collections::HashSet::new();
        for m in &a.matches {
            assert!(seen.insert((m.scale, m.row, m.col)), "cell matched twice");
            let s = GEOMS[m.scale].stride as f64;
            let (cx, cy) = ((m.col as f64 + 0.5) * s, (m.row as f64 + 0.5) * s);
            let b = gts[m.gt].bbox;
            assert!(cx > b[0] && cx < b[2] && cy > b[1] && cy < b[3]);
            assert!(m.dist.iter().all(|&d| d > 0.0 && d < 16.0));
            assert_eq!(a.cells[m.scale][m.row * GEOMS[m.scale].size + m.col], Some(m.gt));
        }
        for (gi, _) in gts.iter().enumerate() {
            for s in 0..3 {
                assert!(a.matches.iter().filter(|m| m.gt == gi && m.scale == s).count() <= 10);
            }
        }
    }
}

#[test]
fn box_loss_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let x = scaled(randn(&[2, 64, 4, 4], &mut r), 2.0);
    let targets = vec![
        BoxTarget { batch: 0, row: 1, col: 2, dist: [1.3, 0.7, 2.2, 4.9] },
        BoxTarget { batch: 1, row: 3, col: 0, dist: [0.2, 3.0, 6.5, 1.1] },
        BoxTarget { batch: 1, row: 0, col: 0, dist: [14.2, 9.9, 0.6, 0.4] },
    ];
    for pick in 0..2 {
        let rep = gradcheck::check(&[x.clone()], 2048, FD_EPS, |tape, v| {
            let (c, d, _) = box_losses(tape, v[0], 16, targets.clone()).unwrap();
            Ok(if pick == 0 { c } else { d })
        })
        .unwrap();
        common::assert_grad(if pick == 0 { "ciou op" } else { "dfl op" }, rep);
    }
}

fn tiny_heads(nc: usize, logit: f64) -> (Tape, ripeloc_core::model::HeadOutputs) {
    let mut tape = Tape::new();
    let mut scales = Vec::new();
    for g in GEOMS {
        let cls = tape.constant(Tensor::full(&[1, nc, g.size, g.size], logit));
        let reg = tape.constant(Tensor::zeros(&[1, 64, g.size, g.size]));
        scales.push(ripeloc_core::model::ScaleOutput {
            cls,
            reg,
            stride: g.stride,
            size: g.size,
        });
    }
    (tape, ripeloc_core::model::HeadOutputs { scales, bindings: vec![] })
}

#[test]
fn empty_scene_with_confident_background_costs_nothing() {
    let (mut tape, heads) = tiny_heads(2, -40.0);
    let l = total_loss(&mut tape, &heads, &[vec![]], 16, &LossConfig::default()).unwrap();
    assert_eq!(l.matches, 0);
    assert!(tape.value(l.total).item() < 1e-15);
    assert_eq!((l.box_, l.dfl), (0.0, 0.0));
}

#[test]
fn perfect_prediction_zeroes_box_terms() {
    // A 16×16 box centred on a stride-8 cell: integer distances 1 at P3.
    let (mut tape, mut heads) = tiny_heads(2, -40.0);
    let g = gt(1, [28.0, 28.0, 44.0, 44.0]);
    let a = assign_targets(std::slice::from_ref(&g), &GEOMS, 16, 10).unwrap();
    for (si, geom) in GEOMS.iter().enumerate() {
        let n = geom.size * geom.size;
        let mut reg = vec![0.0; 64 * n];
        let mut cls = vec![-40.0; 2 * n];
        for m in a.matches.iter().filter(|m| m.scale == si) {
            let cell = m.row * geom.size + m.col;
            cls[n + cell] = 40.0;
            for side in 0..4 {
                let t = m.dist[side];
                let i = t.floor() as usize;
                let f = t - i as f64;
                // Logits whose softmax is exactly (1−f, f) on the bracketing bins.
                for k in 0..16 {
                    reg[(side * 16 + k) * n + cell] = -300.0;
                }
                reg[(side * 16 + i) * n + cell] = (1.0 - f).max(1e-300).ln();
                reg[(side * 16 + i + 1) * n + cell] = f.max(1e-300).ln();
            }
        }
        heads.scales[si].reg = tape.constant(Tensor::new(&[1, 64, geom.size, geom.size], reg).unwrap());
        heads.scales[si].cls = tape.constant(Tensor::new(&[1, 2, geom.size, geom.size], cls).unwrap());
    }
    let l = total_loss(&mut tape, &heads, &[vec![g]], 16, &LossConfig::default()).unwrap();
    assert!(l.matches > 0);
    assert!(l.box_ < 1e-9, "ciou {}", l.box_);
    // DFL bottoms out at the entropy of the bracketing weights, zero when
    // every distance is an integer number of bins.
    let integral = a.matches.iter().all(|m| m.dist.iter().all(|d| d.fract() == 0.0));
    if integral {
        assert!(l.dfl < 1e-9, "dfl {}", l.dfl);
    }
    assert!(a.matches.iter().any(|m| m.dist == [1.0; 4]));
    assert!(l.cls < 1e-15);
}

#[test]
fn total_loss_is_finite_and_nonnegative() {
    let mut r = rng(9);
    for _ in 0..20 {
        let (mut tape, mut heads) = tiny_heads(2, 0.0);
        for s in heads.scales.iter_mut() {
            let n = s.size;
            s.cls = tape.constant(scaled(randn(&[2, 2, n, n], &mut r), 30.0));
            s.reg = tape.constant(scaled(randn(&[2, 64, n, n], &mut r), 30.0));
        }
        let gts = vec![
            vec![gt(0, [10.0, 12.0, 40.0, 30.0]), gt(1, [50.0, 50.0, 90.0, 95.0])],
            vec![],
        ];
        let l = total_loss(&mut tape, &heads, &gts, 16, &LossConfig::default()).unwrap();
        let v = tape.value(l.total).item();
        assert!(v.is_finite() && v >= 0.0);
        assert_eq!(l.dfl_clamped, 0);
    }
}

#[test]
fn out_of_range_class_and_batch_mismatch_are_errors() {
    let (mut tape, heads) = tiny_heads(2, 0.0);
    assert!(total_loss(&mut tape, &heads, &[vec![gt(5, [8.0, 8.0, 30.0, 30.0])]], 16, &LossConfig::default()).is_err());
    assert!(total_loss(&mut tape, &heads, &[vec![], vec![]], 16, &LossConfig::default()).is_err());
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig::new(0.125, 2, 32);
    let model = build_model(&cfg, 11).unwrap();
    let mut r = rng(10);
    // Eight images keep training-mode BatchNorm well conditioned on the
    // 1×1 deepest maps.
    let images = randn(&[8, 3, 32, 32], &mut r);
    let gts: Vec<Vec<GtBox>> = (0..8)
        .map(|i| match i % 3 {
            0 => vec![gt(1, [3.0, 5.0, 21.0, 19.0]), gt(0, [18.0, 16.0, 31.0, 30.0])],
            1 => vec![gt(0, [6.0, 2.0, 28.0, 27.0])],
            _ => vec![],
        })
        .collect();
    let loss_cfg = LossConfig::default();
    let eval = |m: &mut ripeloc_core::Model, grads: bool| -> (f64, Vec<(usize, Vec<f64>)>) {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let heads = m.forward(&mut tape, x, Mode::Train).unwrap();
        let l = total_loss(&mut tape, &heads, &gts, cfg.reg_bins, &loss_cfg).unwrap();
        let v = tape.value(l.total).item();
        let mut out = Vec::new();
        if grads {
            tape.backward(l.total).unwrap();
            for (id, var) in &heads.bindings {
                if let Some(g) = tape.grad(*var) {
                    out.push((id.index(), g.to_vec()));
                }
            }
        }
        (v, out)
    };
    let mut m = model.clone();
    let (_, grads) = eval(&mut m, true);
    let weights: Vec<usize> = m
        .store
        .ids()
        .filter(|&id| m.store.entry(id).kind == ParamKind::Weight)
        .map(|id| id.index())
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pi = weights[r.random_range(0..weights.len())];
        let id = m.store.ids().nth(pi).unwrap();
        let k = r.random_range(0..m.store.get(id).numel());
        let analytic = grads
            .iter()
            .find(|(i, _)| *i == pi)
            .map(|(_, g)| g[k])
            .unwrap_or(0.0);
        let h = 1e-6;
        let mut plus = model.clone();
        plus.store.get_mut(id).data_mut()[k] += h;
        let mut minus = model.clone();
        minus.store.get_mut(id).data_mut()[k] -= h;
        let numeric = (eval(&mut plus, false).0 - eval(&mut minus, false).0) / (2.0 * h);
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(e);
    }
    assert!(worst < 1e-3, "worst rel err {worst:.3e}");
}

#[test]
fn classification_term_normalisation() {
    let mut r = rng(10);
    let (mut tape, mut heads) = tiny_heads(2, 0.0);
    let mut all = Vec::new();
    for s in heads.scales.iter_mut() {
        let n = s.size;
        let t = randn(&[1, 2, n, n], &mut r);
        all.push(t.clone());
        s.cls = tape.constant(t);
    }
    let gts = vec![vec![gt(0, [10.0, 12.0, 40.0, 30.0]), gt(1, [50.0, 50.0, 90.0, 95.0])]];
    let a = assign_targets(&gts[0], &GEOMS, 16, 10).unwrap();
    // Direct sum over every logit with the assignment as 0/1 targets.
    let mut sum = 0.0;
    let mut count = 0;
    for (si, (t, geom)) in all.iter().zip(&GEOMS).enumerate() {
        let n = geom.size * geom.size;
        for c in 0..2 {
            for cell in 0..n {
                let y = a
                    .matches
                    .iter()
                    .any(|m| m.scale == si && m.class_id == c && m.row * geom.size + m.col == cell);
                let z = t.data()[c * n + cell];
                let p = 1.0 / (1.0 + (-z).exp());
                sum -= if y { p.ln() } else { (1.0 - p).ln() };
                count += 1;
            }
        }
    }
    let pos = total_loss(&mut tape, &heads, &gts, 16, &LossConfig::default()).unwrap();
    assert_eq!(pos.matches, a.matches.len());
    assert!((pos.cls - sum / a.matches.len() as f64).abs() < 1e-10);
    let cfg = LossConfig {
        cls_norm: ClsNorm::Logits,
        ..LossConfig::default()
    };
    let mean = total_loss(&mut tape, &heads, &gts, 16, &cfg).unwrap();
    assert!((mean.cls - sum / count as f64).abs() < 1e-10);
    assert!((mean.cls - bce_mean(&all.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>(), &vec![0.0; count])).abs() > 1e-6);
}
