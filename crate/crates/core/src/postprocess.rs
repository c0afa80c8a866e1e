//! Head maps to final detections: anchor-free decode, per-class NMS, class
//! routing and sub-pixel centre refinement for ripe fruit.

use std::fmt::Write as _;

use ripeloc_tensor::sigmoid;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::model::RawScale;

pub const UNRIPE: usize = 0;
pub const RIPE: usize = 1;
pub const DEFAULT_CONF: f64 = 0.40;
pub const DEFAULT_IOU: f64 = 0.45;
/// Log-parabola denominators above this are treated as flat.
const DEGENERATE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Sub-pixel picking point, ripe detections only.
    pub center: Option<(f64, f64)>,
    /// Pyramid level the detection was decoded from.
    #[serde(skip)]
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    pub conf: f64,
    pub iou: f64,
    pub max_det: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            conf: DEFAULT_CONF,
            iou: DEFAULT_IOU,
            max_det: 300,
        }
    }
}

fn image_plane<'a>(t: &'a ripeloc_tensor::Tensor, b: usize) -> (&'a [f64], usize, usize, usize) {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    (&t.data()[b * c * h * w..(b + 1) * c * h * w], c, h, w)
}

/// Decodes batch item `b`. Each cell yields at most one candidate (its best
/// class) when that class's probability reaches `conf`.
pub fn decode(scales: &[RawScale], b: usize, conf: f64, img_size: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for (level, sc) in scales.iter().enumerate() {
        let (cls, nc, h, w) = image_plane(&sc.cls, b);
        let (reg, nreg, _, _) = image_plane(&sc.reg, b);
        let bins = nreg / 4;
        let hw = h * w;
        let s = sc.stride as f64;
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                let (best, logit) = (0..nc)
                    .map(|c| (c, cls[c * hw + cell]))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                let score = sigmoid(logit);
                if score < conf {
                    continue;
                }
                let mut d = [0.0; 4];
                for (side, dv) in d.iter_mut().enumerate() {
                    let z: Vec<f64> = (0..bins).map(|k| reg[(side * bins + k) * hw + cell]).collect();
                    *dv = geometry::expected_bin(&z) * s;
                }
                let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let raw = [cx - d[0], cy - d[1], cx + d[2], cy + d[3]];
                let bbox = geometry::clip(&raw, img_size, img_size);
                if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
                    continue;
                }
                out.push(Detection {
                    class_id: best,
                    score,
                    bbox,
                    center: None,
                    level,
                });
            }
        }
    }
    out
}

/// Greedy per-class NMS. Priority is descending score, then ascending input
/// index; a box is dropped when its IoU with a kept box of its class
/// exceeds `iou_thresh`. Survivors keep priority order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == d.class_id && geometry::iou(&dets[k].bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// 1-D Gaussian (log-parabola) fit through three samples at −1, 0, +1.
fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let (l, c, r) = (l.ln(), c.ln(), r.ln());
    let den = l - 2.0 * c + r;
    if den > -DEGENERATE {
        return 0.0;
    }
    (0.5 * (l - r) / den).clamp(-0.5, 0.5)
}

/// Sub-cell peak offset `(dx, dy)` of a `3×3` window (`w[row][col]`).
/// Non-positive windows are shifted up so that every logarithm is defined.
pub fn gaussian_refine(w: &[[f64; 3]; 3]) -> (f64, f64) {
    let min = w.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let shift = if min <= 0.0 { 1e-9 - min } else { 0.0 };
    let v = |r: usize, c: usize| w[r][c] + shift;
    (
        parabola_offset(v(1, 0), v(1, 1), v(1, 2)),
        parabola_offset(v(0, 1), v(1, 1), v(2, 1)),
    )
}

/// Bilinear read of an `h×w` plane at fractional cell coordinates, with
/// edge replication outside the map.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |i: usize, j: usize| plane[i * w + j];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Refines a pixel-space point on a score plane of the given stride.
pub fn refine_point(plane: &[f64], h: usize, w: usize, stride: f64, x: f64, y: f64) -> (f64, f64) {
    let (u, v) = (x / stride - 0.5, y / stride - 0.5);
    let mut win = [[0.0; 3]; 3];
    for (r, row) in win.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = bilinear(plane, h, w, v + r as f64 - 1.0, u + c as f64 - 1.0);
        }
    }
    let (dx, dy) = gaussian_refine(&win);
    (x + dx * stride, y + dy * stride)
}

/// Unripe detections lose any centre; ripe detections get the box centre
/// refined on the ripe-class probability map of their pyramid level and
/// clamped into the box.
pub fn route_and_localize(dets: Vec<Detection>, scales: &[RawScale], b: usize) -> Vec<Detection> {
    dets.into_iter()
        .map(|mut d| {
            if d.class_id != RIPE {
                d.center = None;
                return d;
            }
            let (gx, gy) = geometry::center(&d.bbox);
            let center = match scales.get(d.level) {
                Some(sc) if sc.cls.shape()[1] > RIPE => {
                    let (cls, _, h, w) = image_plane(&sc.cls, b);
                    let plane: Vec<f64> = cls[RIPE * h * w..(RIPE + 1) * h * w].iter().map(|&z| sigmoid(z)).collect();
                    refine_point(&plane, h, w, sc.stride as f64, gx, gy)
                }
                _ => (gx, gy),
            };
            d.center = Some((center.0.clamp(d.bbox[0], d.bbox[2]), center.1.clamp(d.bbox[1], d.bbox[3])));
            d
        })
        .collect()
}

/// Decode, NMS, cap and route for batch item `b`.
pub fn postprocess(scales: &[RawScale], b: usize, cfg: &PostConfig, img_size: f64) -> Vec<Detection> {
    let mut dets = nms(&decode(scales, b, cfg.conf, img_size), cfg.iou);
    dets.truncate(cfg.max_det);
    route_and_localize(dets, scales, b)
}

/// One line per detection: `image_id class score x1 y1 x2 y2 [cx cy]`.
pub fn format_detections(image_id: &str, dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ = write!(
            s,
            "{image_id} {} {:.6} {:.3} {:.3} {:.3} {:.3}",
            d.class_id, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
        );
        if let Some((x, y)) = d.center {
            let _ = write!(s, " {x:.3} {y:.3}");
        }
        s.push('\n');
    }
    s
}

/// Parses the detection text format into `(image_id, detection)` pairs.
pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 && f.len() != 9 {
            return Err(Error::Data(format!("detection line {}: expected 7 or 9 fields, got {}", n + 1, f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::Data(format!("detection line {}: bad number {:?}", n + 1, f[i])))
        };
        let class_id = f[1]
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("detection line {}: bad class {:?}", n + 1, f[1])))?;
        let bbox = [num(3)?, num(4)?, num(5)?, num(6)?];
        if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
            return Err(Error::Data(format!("detection line {}: empty box", n + 1)));
        }
        let center = if f.len() == 9 { Some((num(7)?, num(8)?)) } else { None };
        out.push((
            f[0].to_string(),
            Detection {
                class_id,
                score: num(2)?,
                bbox,
                center,
                level: 0,
            },
        ));
    }
    Ok(out)
}
