//! Axis-aligned box helpers shared by decoding, matching and the losses.

/// `(x1, y1, x2, y2)`.
pub type BBox = [f64; 4];

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let i = intersection(a, b);
    let u = area(a) + area(b) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

pub fn center(b: &BBox) -> (f64, f64) {
    (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))
}

pub fn clip(b: &BBox, w: f64, h: f64) -> BBox {
    [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)]
}

/// Normalised `(cx, cy, w, h)` to pixel corners.
pub fn from_cxcywh(c: [f64; 4], img_w: f64, img_h: f64) -> BBox {
    [
        (c[0] - c[2] / 2.0) * img_w,
        (c[1] - c[3] / 2.0) * img_h,
        (c[0] + c[2] / 2.0) * img_w,
        (c[1] + c[3] / 2.0) * img_h,
    ]
}

pub fn contains(b: &BBox, x: f64, y: f64) -> bool {
    x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Expected bin index `Σ k·p_k` under the softmax of `z`.
pub fn expected_bin(z: &[f64]) -> f64 {
    softmax(z).iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}
