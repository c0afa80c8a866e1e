//! Training objective: ground-truth to cell assignment, BCE classification,
//! CIoU and distribution focal loss on the regression bins.

use std::ops::{Add, Div, Mul, Neg, Sub};

use ripeloc_tensor::{sigmoid, CustomOp, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::model::HeadOutputs;

pub const DEFAULT_TOPK: usize = 10;
const EPS: f64 = 1e-9;

/// Ground truth in input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub dfl: f64,
    /// Cells kept per ground truth and scale by the assigner.
    pub topk: usize,
    #[serde(default)]
    pub cls_norm: ClsNorm,
}

/// Divisor of the summed classification BCE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsNorm {
    /// Number of matched cells in the batch (at least 1).
    #[default]
    Positives,
    /// Number of classification logits, i.e. the plain mean.
    Logits,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls: 0.5,
            box_: 7.5,
            dfl: 1.5,
            topk: DEFAULT_TOPK,
            cls_norm: ClsNorm::Positives,
        }
    }
}

/// Geometry of one head scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleGeom {
    pub stride: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMatch {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub gt: usize,
    pub class_id: usize,
    /// `(l, t, r, b)` from the cell centre in stride units.
    pub dist: [f64; 4],
    score: f64,
}

/// Assignment for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Per scale, per cell (row-major): matched ground-truth index.
    pub cells: Vec<Vec<Option<usize>>>,
    pub matches: Vec<CellMatch>,
}

/// Centre-prior assignment. A cell is a candidate for a box when its centre
/// lies strictly inside the box and all four distances fit below `bins − 1`.
/// Candidates are ranked by `exp(−d²/2s²) · min(m, m0)/max(m, m0)` where `d`
/// is the distance between the cell and box centres, `s` the stride, `m` the
/// largest side distance in strides and `m0 = (bins − 1)/4`. The best `topk`
/// per box and scale are kept; a cell claimed twice goes to the higher score.
pub fn assign_targets(gts: &[GtBox], scales: &[ScaleGeom], bins: usize, topk: usize) -> Result<Assignment> {
    for (k, g) in gts.iter().enumerate() {
        if !(g.bbox[2] > g.bbox[0] && g.bbox[3] > g.bbox[1]) {
            return Err(Error::Data(format!("ground-truth box {k} has zero area: {:?}", g.bbox)));
        }
    }
    let limit = (bins - 1) as f64;
    let m0 = limit / 4.0;
    let mut cells = Vec::with_capacity(scales.len());
    let mut matches = Vec::new();
    for (si, sc) in scales.iter().enumerate() {
        let s = sc.stride as f64;
        let mut best: Vec<Option<CellMatch>> = vec![None; sc.size * sc.size];
        for (gi, g) in gts.iter().enumerate() {
            let b = &g.bbox;
            let (gx, gy) = geometry::center(b);
            let mut cand: Vec<CellMatch> = Vec::new();
            let r0 = ((b[1] / s - 0.5).floor().max(0.0)) as usize;
            let c0 = ((b[0] / s - 0.5).floor().max(0.0)) as usize;
            for row in r0..sc.size {
                let cy = (row as f64 + 0.5) * s;
                if cy >= b[3] {
                    break;
                }
                for col in c0..sc.size {
                    let cx = (col as f64 + 0.5) * s;
                    if cx >= b[2] {
                        break;
                    }
                    if cx <= b[0] || cy <= b[1] {
                        continue;
                    }
                    let dist = [(cx - b[0]) / s, (cy - b[1]) / s, (b[2] - cx) / s, (b[3] - cy) / s];
                    let m = dist.iter().copied().fold(0.0, f64::max);
                    if m >= limit {
                        continue;
                    }
                    let d2 = ((cx - gx).powi(2) + (cy - gy).powi(2)) / (s * s);
                    let score = (-0.5 * d2).exp() * m.min(m0) / m.max(m0);
                    cand.push(CellMatch {
                        scale: si,
                        row,
                        col,
                        gt: gi,
                        class_id: g.class_id,
                        dist,
                        score,
                    });
                }
            }
            cand.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.row, a.col).cmp(&(b.row, b.col))));
            for c in cand.into_iter().take(topk) {
                let slot = &mut best[c.row * sc.size + c.col];
                if slot.as_ref().is_none_or(|o| c.score > o.score) {
                    *slot = Some(c);
                }
            }
        }
        cells.push(best.iter().map(|m| m.as_ref().map(|m| m.gt)).collect());
        matches.extend(best.into_iter().flatten());
    }
    Ok(Assignment { cells, matches })
}

/// Stable `softplus(z) − z·y`, the per-element BCE with logits.
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy with logits.
pub fn bce_mean(z: &[f64], y: &[f64]) -> f64 {
    z.iter().zip(y).map(|(&z, &y)| bce_term(z, y)).sum::<f64>() / z.len().max(1) as f64
}

#[derive(Debug)]
struct BceOp {
    targets: Vec<f64>,
}

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let z = inputs[0].data();
        let k = g[0] / z.len().max(1) as f64;
        vec![Some(z.iter().zip(&self.targets).map(|(&z, &y)| k * (sigmoid(z) - y)).collect())]
    }
}

/// Records mean BCE of `logits` against `targets` (same element count).
pub fn bce(tape: &mut Tape, logits: Var, targets: Vec<f64>) -> Result<Var> {
    let z = tape.value(logits);
    if z.numel() != targets.len() {
        return Err(Error::Data(format!(
            "bce: {} logits but {} targets",
            z.numel(),
            targets.len()
        )));
    }
    let v = bce_mean(z.data(), &targets);
    Ok(tape.custom(&[logits], Tensor::scalar(v), Box::new(BceOp { targets })))
}

/// Clamps a DFL target into `[0, bins − 1]`; reports whether it had to.
fn dfl_bracket(target: f64, bins: usize) -> (usize, f64, f64, bool) {
    let hi = (bins - 1) as f64;
    let clamped = !(0.0..=hi).contains(&target);
    let t = target.clamp(0.0, hi);
    let i = (t.floor() as usize).min(bins - 2);
    let wr = t - i as f64;
    (i, 1.0 - wr, wr, clamped)
}

/// DFL on one side: `−[(i+1−t) ln p_i + (t−i) ln p_{i+1}]`.
pub fn dfl(logits: &[f64], target: f64) -> f64 {
    let (i, wl, wr, _) = dfl_bracket(target, logits.len());
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    -(wl * (logits[i] - lse) + wr * (logits[i + 1] - lse))
}

/// Gradient of [`dfl`] with respect to the logits.
pub fn dfl_grad(logits: &[f64], target: f64) -> Vec<f64> {
    let (i, wl, wr, _) = dfl_bracket(target, logits.len());
    let mut g = geometry::softmax(logits);
    g[i] -= wl;
    g[i + 1] -= wr;
    g
}

/// Forward-mode number carrying derivatives w.r.t. four inputs.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn cst(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }

    fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 4];
        d[k] = 1.0;
        Dual { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Dual {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|k| self.d[k] + o.d[k]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|k| self.d[k] - o.d[k]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual {
            v: self.v * inv,
            d: std::array::from_fn(|k| (self.d[k] - self.v * inv * o.d[k]) * inv),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

fn ciou_dual(p: [Dual; 4], g: &BBox) -> Dual {
    let c = Dual::cst;
    let zero = c(0.0);
    let [gx1, gy1, gx2, gy2] = g.map(c);
    let iw = (p[2].min(gx2) - p[0].max(gx1)).max(zero);
    let ih = (p[3].min(gy2) - p[1].max(gy1)).max(zero);
    let inter = iw * ih;
    let (w, h) = (p[2] - p[0], p[3] - p[1]);
    let (wg, hg) = (gx2 - gx1, gy2 - gy1);
    let union = w * h + wg * hg - inter;
    let iou = inter / union;
    let cw = p[2].max(gx2) - p[0].min(gx1);
    let ch = p[3].max(gy2) - p[1].min(gy1);
    let c2 = cw * cw + ch * ch;
    let dx = p[0] + p[2] - gx1 - gx2;
    let dy = p[1] + p[3] - gy1 - gy2;
    let rho2 = (dx * dx + dy * dy) / c(4.0);
    let k = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let da = (wg / (hg + c(EPS))).atan() - (w / (h + c(EPS))).atan();
    let v = c(k) * da * da;
    let alpha = v / (c(1.0) - iou + v + c(EPS));
    c(1.0) - iou + rho2 / c2 + alpha * v
}

/// CIoU loss `1 − IoU + ρ²/c² + α·v`.
pub fn ciou(pred: &BBox, gt: &BBox) -> f64 {
    ciou_dual(pred.map(Dual::cst), gt).v
}

/// CIoU loss and its gradient w.r.t. the predicted corners (α included).
pub fn ciou_with_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let p = [0, 1, 2, 3].map(|k| Dual::var(pred[k], k));
    let r = ciou_dual(p, gt);
    (r.v, r.d)
}

/// Flat index of bin `k` of side `side` at `(b, row, col)` of a
/// `N × 4B × S × S` map.
fn reg_index(bins: usize, size: usize, b: usize, side: usize, k: usize, row: usize, col: usize) -> usize {
    (((b * 4 + side) * bins + k) * size + row) * size + col
}

/// A regression target at one cell: `(batch, row, col, dist, gt box)` with
/// the box expressed in stride units around the cell centre frame.
#[derive(Clone, Debug)]
pub struct BoxTarget {
    pub batch: usize,
    pub row: usize,
    pub col: usize,
    pub dist: [f64; 4],
}

impl BoxTarget {
    fn gt_box(&self) -> BBox {
        let (cx, cy) = (self.col as f64 + 0.5, self.row as f64 + 0.5);
        [cx - self.dist[0], cy - self.dist[1], cx + self.dist[2], cy + self.dist[3]]
    }
}

fn side_logits(reg: &[f64], bins: usize, size: usize, t: &BoxTarget, side: usize) -> Vec<f64> {
    (0..bins)
        .map(|k| reg[reg_index(bins, size, t.batch, side, k, t.row, t.col)])
        .collect()
}

fn pred_box(reg: &[f64], bins: usize, size: usize, t: &BoxTarget) -> (BBox, [Vec<f64>; 4], [f64; 4]) {
    let probs: [Vec<f64>; 4] = std::array::from_fn(|s| geometry::softmax(&side_logits(reg, bins, size, t, s)));
    let d: [f64; 4] = std::array::from_fn(|s| probs[s].iter().enumerate().map(|(k, p)| k as f64 * p).sum());
    let (cx, cy) = (t.col as f64 + 0.5, t.row as f64 + 0.5);
    ([cx - d[0], cy - d[1], cx + d[2], cy + d[3]], probs, d)
}

#[derive(Debug)]
struct CiouOp {
    bins: usize,
    size: usize,
    targets: Vec<BoxTarget>,
}

impl CustomOp for CiouOp {
    fn name(&self) -> &'static str {
        "ciou"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let reg = inputs[0].data();
        let mut grad = vec![0.0; reg.len()];
        let k = g[0] / self.targets.len().max(1) as f64;
        for t in &self.targets {
            let (pb, probs, d) = pred_box(reg, self.bins, self.size, t);
            let (_, gb) = ciou_with_grad(&pb, &t.gt_box());
            // x1 = cx − l, y1 = cy − t, x2 = cx + r, y2 = cy + b.
            let dd = [-gb[0], -gb[1], gb[2], gb[3]];
            for side in 0..4 {
                for (bin, p) in probs[side].iter().enumerate() {
                    let idx = reg_index(self.bins, self.size, t.batch, side, bin, t.row, t.col);
                    grad[idx] += k * dd[side] * p * (bin as f64 - d[side]);
                }
            }
        }
        vec![Some(grad)]
    }
}

#[derive(Debug)]
struct DflOp {
    bins: usize,
    size: usize,
    targets: Vec<BoxTarget>,
}

impl CustomOp for DflOp {
    fn name(&self) -> &'static str {
        "dfl"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let reg = inputs[0].data();
        let mut grad = vec![0.0; reg.len()];
        let k = g[0] / (4 * self.targets.len().max(1)) as f64;
        for t in &self.targets {
            for side in 0..4 {
                let gz = dfl_grad(&side_logits(reg, self.bins, self.size, t, side), t.dist[side]);
                for (bin, v) in gz.iter().enumerate() {
                    grad[reg_index(self.bins, self.size, t.batch, side, bin, t.row, t.col)] += k * v;
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Mean CIoU and mean per-side DFL over `targets` on one regression map.
/// Returns the two loss nodes and the number of clamped DFL targets.
pub fn box_losses(tape: &mut Tape, reg: Var, bins: usize, targets: Vec<BoxTarget>) -> Result<(Var, Var, usize)> {
    let shape = tape.shape(reg).to_vec();
    if shape.len() != 4 || shape[1] != 4 * bins || shape[2] != shape[3] {
        return Err(Error::Data(format!("regression map {shape:?} does not hold 4×{bins} bins")));
    }
    let size = shape[2];
    let data = tape.value(reg).data();
    let n = targets.len().max(1) as f64;
    let mut ciou_sum = 0.0;
    let mut dfl_sum = 0.0;
    let mut clamped = 0;
    for t in &targets {
        let (pb, _, _) = pred_box(data, bins, size, t);
        ciou_sum += ciou(&pb, &t.gt_box());
        for side in 0..4 {
            clamped += dfl_bracket(t.dist[side], bins).3 as usize;
            dfl_sum += dfl(&side_logits(data, bins, size, t, side), t.dist[side]);
        }
    }
    let c = tape.custom(
        &[reg],
        Tensor::scalar(ciou_sum / n),
        Box::new(CiouOp {
            bins,
            size,
            targets: targets.clone(),
        }),
    );
    let d = tape.custom(&[reg], Tensor::scalar(dfl_sum / (4.0 * n)), Box::new(DflOp { bins, size, targets }));
    Ok((c, d, clamped))
}

/// Scalar loss node plus the detached component values.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub box_: f64,
    pub dfl: f64,
    pub matches: usize,
    pub dfl_clamped: usize,
}

/// `λ_cls·BCE + λ_box·CIoU + λ_dfl·DFL` over a batch. BCE is summed over
/// every classification logit of every scale and divided per
/// [`ClsNorm`]; the box terms average over matched cells and are dropped
/// when nothing matched.
pub fn total_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    gts: &[Vec<GtBox>],
    bins: usize,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let geoms: Vec<ScaleGeom> = heads
        .scales
        .iter()
        .map(|s| ScaleGeom {
            stride: s.stride,
            size: s.size,
        })
        .collect();
    let batch = tape.shape(heads.scales[0].cls)[0];
    if gts.len() != batch {
        return Err(Error::Data(format!("{} label sets for a batch of {batch}", gts.len())));
    }
    let assignments = gts
        .iter()
        .map(|g| assign_targets(g, &geoms, bins, cfg.topk))
        .collect::<Result<Vec<_>>>()?;

    let mut cls_terms: Vec<Var> = Vec::new();
    let mut cls_weights: Vec<f64> = Vec::new();
    let mut box_terms: Vec<(Var, Var, usize)> = Vec::new();
    let mut clamped = 0;
    let total_logits: usize = heads.scales.iter().map(|s| tape.value(s.cls).numel()).sum();
    let mut matches = 0;
    for (si, sc) in heads.scales.iter().enumerate() {
        let shape = tape.shape(sc.cls).to_vec();
        let (nc, size) = (shape[1], shape[2]);
        let hw = size * size;
        let mut y = vec![0.0; tape.value(sc.cls).numel()];
        let mut targets = Vec::new();
        for (b, a) in assignments.iter().enumerate() {
            for m in a.matches.iter().filter(|m| m.scale == si) {
                if m.class_id >= nc {
                    return Err(Error::Data(format!("class {} out of range for {nc} classes", m.class_id)));
                }
                y[(b * nc + m.class_id) * hw + m.row * size + m.col] = 1.0;
                targets.push(BoxTarget {
                    batch: b,
                    row: m.row,
                    col: m.col,
                    dist: m.dist,
                });
            }
        }
        cls_weights.push(y.len() as f64);
        cls_terms.push(bce(tape, sc.cls, y)?);
        if !targets.is_empty() {
            let n = targets.len();
            matches += n;
            let (c, d, k) = box_losses(tape, sc.reg, bins, targets)?;
            clamped += k;
            box_terms.push((c, d, n));
        }
    }

    // Per-scale means times element counts give sums.
    let denom = match cfg.cls_norm {
        ClsNorm::Logits => total_logits,
        ClsNorm::Positives => matches.max(1),
    } as f64;
    let mut cls = None;
    for (t, w) in cls_terms.into_iter().zip(cls_weights) {
        let s = tape.scale(t, w / denom);
        cls = Some(match cls {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let cls = cls.ok_or_else(|| Error::Data("model produced no head scales".into()))?;
    let cls_val = tape.value(cls).item();
    let mut total = tape.scale(cls, cfg.cls);
    let (mut box_val, mut dfl_val) = (0.0, 0.0);
    for (c, d, n) in box_terms {
        let f = n as f64 / matches as f64;
        box_val += f * tape.value(c).item();
        dfl_val += f * tape.value(d).item();
        let cw = tape.scale(c, cfg.box_ * f);
        let dw = tape.scale(d, cfg.dfl * f);
        total = tape.add(total, cw)?;
        total = tape.add(total, dw)?;
    }
    let tv = tape.value(total).item();
    if !tv.is_finite() {
        return Err(Error::Numeric(format!("loss is {tv}")));
    }
    Ok(LossParts {
        total,
        cls: cls_val,
        box_: box_val,
        dfl: dfl_val,
        matches,
        dfl_clamped: clamped,
    })
}
