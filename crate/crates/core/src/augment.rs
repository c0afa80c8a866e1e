//! Label-consistent training augmentation.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::geometry::{self, BBox};

/// Boxes keeping less than this fraction of their area after a geometric
/// transform are dropped.
pub const MIN_VISIBLE_FRACTION: f64 = 0.10;
/// Canvas fill for regions a transform leaves uncovered.
pub const FILL: f32 = 114.0 / 255.0;

/// Hexcone RGB → HSV with `h ∈ [0, 360)`, `s, v ∈ [0, 1]`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let v = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = v - min;
    let s = if v > 0.0 { c / v } else { 0.0 };
    let h = if c == 0.0 {
        0.0
    } else if v == r {
        60.0 * ((g - b) / c)
    } else if v == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    [h.rem_euclid(360.0) % 360.0, s, v]
}

/// Inverse of [`rgb_to_hsv`]; the largest channel is exactly `v`.
pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h = h.rem_euclid(360.0) / 60.0;
    let i = (h.floor() as usize).min(5);
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugStrength {
    Heavy,
    Moderate,
    Light,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub hsv_h: f64,
    pub hsv_s: f64,
    pub hsv_v: f64,
    pub flip_p: f64,
    /// Zoom factor range; `(1, 1)` disables scaling.
    pub scale_range: (f64, f64),
    pub mosaic_p: f64,
    pub mixup_p: f64,
    pub copypaste_p: f64,
    pub erase_p: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self::greenhouse()
    }
}

impl AugConfig {
    /// Greenhouse-calibrated colour gains with the heavy transform set.
    pub fn greenhouse() -> Self {
        Self {
            hsv_h: 0.042,
            hsv_s: 0.5,
            hsv_v: 0.4,
            flip_p: 0.5,
            scale_range: (0.75, 1.25),
            mosaic_p: 1.0,
            mixup_p: 0.3,
            copypaste_p: 0.2,
            erase_p: 0.1,
        }
    }

    /// Stock detector colour gains, otherwise identical to [`Self::greenhouse`].
    pub fn stock_hsv() -> Self {
        Self {
            hsv_h: 0.015,
            hsv_s: 0.7,
            ..Self::greenhouse()
        }
    }

    pub fn none() -> Self {
        Self {
            hsv_h: 0.0,
            hsv_s: 0.0,
            hsv_v: 0.0,
            flip_p: 0.0,
            scale_range: (1.0, 1.0),
            mosaic_p: 0.0,
            mixup_p: 0.0,
            copypaste_p: 0.0,
            erase_p: 0.0,
        }
    }

    /// Restricts this configuration to a phase strength. Heavy keeps
    /// everything; moderate drops copy-paste and erasing and halves mosaic;
    /// light keeps colour jitter and flips only.
    pub fn with_strength(&self, s: AugStrength) -> Self {
        match s {
            AugStrength::Heavy => *self,
            AugStrength::Moderate => Self {
                mosaic_p: self.mosaic_p * 0.5,
                copypaste_p: 0.0,
                erase_p: 0.0,
                ..*self
            },
            AugStrength::Light => Self {
                scale_range: (1.0, 1.0),
                mosaic_p: 0.0,
                mixup_p: 0.0,
                copypaste_p: 0.0,
                erase_p: 0.0,
                ..*self
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_p,
            self.mosaic_p,
            self.mixup_p,
            self.copypaste_p,
            self.erase_p,
            self.hsv_s,
            self.hsv_v,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities and gains must lie in [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.hsv_h) {
            return Err(Error::Config("hsv_h must lie in [0, 0.5]".into()));
        }
        let (a, b) = self.scale_range;
        if !(a > 0.0 && a <= b) {
            return Err(Error::Config("scale_range must satisfy 0 < lo ≤ hi".into()));
        }
        Ok(())
    }

    /// Names of the transforms this configuration can apply.
    pub fn enabled(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.hsv_h > 0.0 || self.hsv_s > 0.0 || self.hsv_v > 0.0 {
            v.push("hsv");
        }
        let flags = [
            (self.flip_p > 0.0, "flip"),
            (self.scale_range != (1.0, 1.0), "scale"),
            (self.mosaic_p > 0.0, "mosaic"),
            (self.mixup_p > 0.0, "mixup"),
            (self.copypaste_p > 0.0, "copy_paste"),
            (self.erase_p > 0.0, "erase"),
        ];
        v.extend(flags.iter().filter(|f| f.0).map(|f| f.1));
        v
    }
}

fn sym(rng: &mut impl Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

/// Per-image hue shift and saturation/value gains. Zero gains return the
/// input untouched.
pub fn hsv_jitter(image: &Image, cfg: &AugConfig, rng: &mut impl Rng) -> Image {
    if cfg.hsv_h == 0.0 && cfg.hsv_s == 0.0 && cfg.hsv_v == 0.0 {
        return image.clone();
    }
    let dh = sym(rng, cfg.hsv_h) * 360.0;
    let gs = 1.0 + sym(rng, cfg.hsv_s);
    let gv = 1.0 + sym(rng, cfg.hsv_v);
    hsv_apply(image, dh, gs, gv)
}

/// Shifts hue by `dh` degrees and scales saturation and value.
pub fn hsv_apply(image: &Image, dh: f64, gs: f64, gv: f64) -> Image {
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(3) {
        let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]].map(f64::from));
        let rgb = hsv_to_rgb([(h + dh).rem_euclid(360.0), (s * gs).clamp(0.0, 1.0), (v * gv).clamp(0.0, 1.0)]);
        for c in 0..3 {
            px[c] = rgb[c] as f32;
        }
    }
    out
}

fn flip_mask(m: &Mask, width: usize) -> Mask {
    let mut bits = vec![false; m.bits.len()];
    for y in 0..m.height {
        for x in 0..m.width {
            bits[y * m.width + (m.width - 1 - x)] = m.bits[y * m.width + x];
        }
    }
    Mask {
        x0: width - (m.x0 + m.width),
        y0: m.y0,
        width: m.width,
        height: m.height,
        bits,
    }
}

/// Mirrors the image left to right together with boxes, centres and masks.
pub fn hflip(s: &Sample) -> Sample {
    let w = s.image.width;
    let mut image = s.image.clone();
    for y in 0..s.image.height {
        for x in 0..w {
            image.set(x, y, s.image.get(w - 1 - x, y));
        }
    }
    let annotations = s
        .annotations
        .iter()
        .map(|a| Annotation {
            class_id: a.class_id,
            bbox: [1.0 - a.bbox[2], a.bbox[1], 1.0 - a.bbox[0], a.bbox[3]],
            center: a.center.map(|(x, y)| (1.0 - x, y)),
            mask: a.mask.as_ref().map(|m| flip_mask(m, w)),
            disk: a.disk.map(|(x, y, r)| (w as f64 - x, y, r)),
        })
        .collect();
    Sample { image, annotations }
}

/// Maps a box through `p ↦ p·k + offset`, clips it to the unit square and
/// keeps it when at least [`MIN_VISIBLE_FRACTION`] of its mapped area stays
/// visible. Centres outside the clipped box are dropped.
fn remap(a: &Annotation, k: (f64, f64), off: (f64, f64)) -> Option<Annotation> {
    let b = [
        a.bbox[0] * k.0 + off.0,
        a.bbox[1] * k.1 + off.1,
        a.bbox[2] * k.0 + off.0,
        a.bbox[3] * k.1 + off.1,
    ];
    let full = geometry::area(&b);
    let c = geometry::clip(&b, 1.0, 1.0);
    if full <= 0.0 || geometry::area(&c) < MIN_VISIBLE_FRACTION * full || c[2] <= c[0] || c[3] <= c[1] {
        return None;
    }
    let center = a
        .center
        .map(|(x, y)| (x * k.0 + off.0, y * k.1 + off.1))
        .filter(|&(x, y)| x > c[0] && x < c[2] && y > c[1] && y < c[3]);
    Some(Annotation {
        class_id: a.class_id,
        bbox: c,
        center,
        mask: None,
        disk: None,
    })
}

fn bilinear(im: &Image, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = (im.width as f64, im.height as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return [FILL; 3];
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(im.width - 1), (y0 + 1).min(im.height - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let (a, b, c, d) = (im.get(x0, y0), im.get(x1, y0), im.get(x0, y1), im.get(x1, y1));
    std::array::from_fn(|ch| {
        (1.0 - fy) * ((1.0 - fx) * a[ch] + fx * b[ch]) + fy * ((1.0 - fx) * c[ch] + fx * d[ch])
    })
}

/// Zooms about the image centre by `factor` on a canvas of the same size.
pub fn scale_by(s: &Sample, factor: f64) -> Sample {
    let (w, h) = (s.image.width, s.image.height);
    let mut image = Image::new(w, h);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 + 0.5 - cx) / factor + cx - 0.5;
            let sy = (y as f64 + 0.5 - cy) / factor + cy - 0.5;
            image.set(x, y, bilinear(&s.image, sx, sy));
        }
    }
    let off = 0.5 - 0.5 * factor;
    let annotations = s
        .annotations
        .iter()
        .filter_map(|a| remap(a, (factor, factor), (off, off)))
        .collect();
    Sample { image, annotations }
}

pub fn random_scale(s: &Sample, range: (f64, f64), rng: &mut impl Rng) -> Sample {
    if range.1 <= range.0 {
        return if range.0 == 1.0 { s.clone() } else { scale_by(s, range.0) };
    }
    scale_by(s, rng.random_range(range.0..range.1))
}

/// Four-tile mosaic around a jittered centre. Tile `k` (top-left, top-right,
/// bottom-left, bottom-right) is placed with its inner corner on the centre.
pub fn mosaic(samples: &[&Sample], rng: &mut impl Rng) -> Result<Sample> {
    if samples.len() != 4 {
        return Err(Error::Data(format!("mosaic needs 4 samples, got {}", samples.len())));
    }
    let (w, h) = (samples[0].image.width, samples[0].image.height);
    if samples.iter().any(|s| s.image.width != w || s.image.height != h) {
        return Err(Error::Data("mosaic samples must share one size".into()));
    }
    let xc = rng.random_range(w / 4..=3 * w / 4);
    let yc = rng.random_range(h / 4..=3 * h / 4);
    let mut image = Image::filled(w, h, [FILL; 3]);
    let mut annotations = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        // Pixel offset added to tile coordinates.
        let (ox, oy) = match k {
            0 => (xc as isize - w as isize, yc as isize - h as isize),
            1 => (xc as isize, yc as isize - h as isize),
            2 => (xc as isize - w as isize, yc as isize),
            _ => (xc as isize, yc as isize),
        };
        let (x_lo, x_hi) = if k % 2 == 0 { (0, xc) } else { (xc, w) };
        let (y_lo, y_hi) = if k < 2 { (0, yc) } else { (yc, h) };
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (sx, sy) = (x as isize - ox, y as isize - oy);
                if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    image.set(x, y, s.image.get(sx as usize, sy as usize));
                }
            }
        }
        let off = (ox as f64 / w as f64, oy as f64 / h as f64);
        let region = [
            x_lo as f64 / w as f64,
            y_lo as f64 / h as f64,
            x_hi as f64 / w as f64,
            y_hi as f64 / h as f64,
        ];
        for a in &s.annotations {
            let shifted = [a.bbox[0] + off.0, a.bbox[1] + off.1, a.bbox[2] + off.0, a.bbox[3] + off.1];
            let full = geometry::area(&shifted);
            let c = [
                shifted[0].max(region[0]),
                shifted[1].max(region[1]),
                shifted[2].min(region[2]),
                shifted[3].min(region[3]),
            ];
            if c[2] <= c[0] || c[3] <= c[1] || geometry::area(&c) < MIN_VISIBLE_FRACTION * full {
                continue;
            }
            let center = a
                .center
                .map(|(x, y)| (x + off.0, y + off.1))
                .filter(|&(x, y)| x > c[0] && x < c[2] && y > c[1] && y < c[3]);
            annotations.push(Annotation {
                class_id: a.class_id,
                bbox: c,
                center,
                mask: None,
                disk: None,
            });
        }
    }
    Ok(Sample { image, annotations })
}

/// `λ·a + (1−λ)·b` with the union of both label sets.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if a.image.width != b.image.width || a.image.height != b.image.height {
        return Err(Error::Data("mixup samples must share one size".into()));
    }
    let (l, m) = (lambda as f32, (1.0 - lambda) as f32);
    let data = a.image.data.iter().zip(&b.image.data).map(|(x, y)| l * x + m * y).collect();
    let mut annotations = a.annotations.clone();
    annotations.extend(b.annotations.iter().cloned());
    Ok(Sample {
        image: Image {
            width: a.image.width,
            height: a.image.height,
            data,
        },
        annotations,
    })
}

/// Pastes one donor fruit into `a` at the candidate position (out of 50
/// random ones) that overlaps existing boxes least. Donors with a mask paste
/// exactly the visible fruit pixels; without one the whole box region is
/// copied.
pub fn copy_paste(a: &Sample, donor: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    if donor.annotations.is_empty() {
        return Err(Error::Data("copy-paste donor has no annotations".into()));
    }
    let d = &donor.annotations[rng.random_range(0..donor.annotations.len())];
    let (dw, dh) = (donor.image.width as f64, donor.image.height as f64);
    let (w, h) = (a.image.width, a.image.height);
    let mask = match &d.mask {
        Some(m) => m.clone(),
        None => {
            let x0 = (d.bbox[0] * dw).floor() as usize;
            let y0 = (d.bbox[1] * dh).floor() as usize;
            let x1 = ((d.bbox[2] * dw).ceil() as usize).min(donor.image.width);
            let y1 = ((d.bbox[3] * dh).ceil() as usize).min(donor.image.height);
            Mask {
                x0,
                y0,
                width: x1 - x0,
                height: y1 - y0,
                bits: vec![true; (x1 - x0) * (y1 - y0)],
            }
        }
    };
    let b = mask
        .bounds()
        .ok_or_else(|| Error::Data("copy-paste donor mask is empty".into()))?;
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    if bw > w || bh > h {
        return Err(Error::Data("copy-paste donor is larger than the target".into()));
    }
    let existing: Vec<BBox> = a
        .annotations
        .iter()
        .map(|e| [e.bbox[0] * w as f64, e.bbox[1] * h as f64, e.bbox[2] * w as f64, e.bbox[3] * h as f64])
        .collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for _ in 0..50 {
        let x = rng.random_range(0..=w - bw);
        let y = rng.random_range(0..=h - bh);
        let cand = [x as f64, y as f64, (x + bw) as f64, (y + bh) as f64];
        let overlap: f64 = existing.iter().map(|e| geometry::intersection(e, &cand)).sum();
        if best.is_none_or(|(o, _, _)| overlap < o) {
            best = Some((overlap, x, y));
        }
        if overlap == 0.0 {
            break;
        }
    }
    let (_, tx, ty) = best.ok_or_else(|| Error::Numeric("no paste position".into()))?;
    let mut image = a.image.clone();
    for y in b[1]..b[3] {
        for x in b[0]..b[2] {
            if mask.contains(x, y) {
                image.set(tx + x - b[0], ty + y - b[1], donor.image.get(x, y));
            }
        }
    }
    let (sx, sy) = (tx as f64 - b[0] as f64, ty as f64 - b[1] as f64);
    let bbox = [
        tx as f64 / w as f64,
        ty as f64 / h as f64,
        (tx + bw) as f64 / w as f64,
        (ty + bh) as f64 / h as f64,
    ];
    let center = d
        .center
        .map(|(cx, cy)| ((cx * dw + sx) / w as f64, (cy * dh + sy) / h as f64))
        .filter(|&(x, y)| x > bbox[0] && x < bbox[2] && y > bbox[1] && y < bbox[3]);
    let mut annotations: Vec<Annotation> = a
        .annotations
        .iter()
        .map(|e| Annotation {
            mask: None,
            disk: None,
            ..e.clone()
        })
        .collect();
    annotations.push(Annotation {
        class_id: d.class_id,
        bbox,
        center,
        mask: None,
        disk: None,
    });
    Ok(Sample { image, annotations })
}

/// Blanks a random rectangle (2–20% of the image, aspect 0.3–3.3) with
/// uniform noise. Labels are left as they are.
pub fn random_erase(a: &Sample, rng: &mut impl Rng) -> Sample {
    let (w, h) = (a.image.width, a.image.height);
    let area = rng.random_range(0.02..0.2) * (w * h) as f64;
    let aspect = rng.random_range(0.3f64..3.3);
    let ew = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let eh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let x0 = rng.random_range(0..=w - ew);
    let y0 = rng.random_range(0..=h - eh);
    let mut out = a.clone();
    for y in y0..y0 + eh {
        for x in x0..x0 + ew {
            let v: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>());
            out.image.set(x, y, v);
        }
    }
    out
}

/// Full training pipeline for item `index` of `pool`: copy-paste, mosaic,
/// scale, mixup, colour jitter, flip, erase, each gated by its probability.
pub fn augment(pool: &[&Sample], index: usize, cfg: &AugConfig, rng: &mut impl Rng) -> Result<Sample> {
    if pool.is_empty() {
        return Err(Error::Data("augmentation pool is empty".into()));
    }
    let pick = |rng: &mut dyn rand::RngCore| pool[rng.random_range(0..pool.len())];
    let mut s = pool[index].clone();
    if cfg.copypaste_p > 0.0 && rng.random_bool(cfg.copypaste_p) {
        let donor = pick(rng);
        if !donor.annotations.is_empty() {
            s = copy_paste(&s, donor, rng)?;
        }
    }
    if cfg.mosaic_p > 0.0 && rng.random_bool(cfg.mosaic_p) {
        let others = [pick(rng), pick(rng), pick(rng)];
        s = mosaic(&[&s, others[0], others[1], others[2]], rng)?;
    }
    if cfg.scale_range != (1.0, 1.0) {
        s = random_scale(&s, cfg.scale_range, rng);
    }
    if cfg.mixup_p > 0.0 && rng.random_bool(cfg.mixup_p) {
        let other = pick(rng);
        let lambda = Beta::new(32.0, 32.0)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng);
        s = mixup(&s, other, lambda)?;
    }
    s.image = hsv_jitter(&s.image, cfg, rng);
    if cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p) {
        s = hflip(&s);
    }
    if cfg.erase_p > 0.0 && rng.random_bool(cfg.erase_p) {
        s = random_erase(&s, rng);
    }
    Ok(s)
}
