//! Box and picking-point overlays for visual inspection.

use ripeloc_core::data::Image;
use ripeloc_core::geometry::BBox;
use ripeloc_core::postprocess::RIPE;

const UNRIPE_RGB: [f32; 3] = [1.0, 0.85, 0.0];
const RIPE_RGB: [f32; 3] = [0.0, 0.9, 1.0];
const CENTER_RGB: [f32; 3] = [1.0, 0.0, 1.0];

/// One overlay item in pixel coordinates.
pub struct Mark {
    pub class_id: usize,
    pub bbox: BBox,
    pub center: Option<(f64, f64)>,
}

fn put(img: &mut Image, x: i64, y: i64, rgb: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.set(x as usize, y as usize, rgb);
    }
}

fn rect(img: &mut Image, b: &BBox, rgb: [f32; 3]) {
    let (x1, y1) = (b[0].floor() as i64, b[1].floor() as i64);
    let (x2, y2) = ((b[2].ceil() as i64 - 1).max(x1), (b[3].ceil() as i64 - 1).max(y1));
    for x in x1..=x2 {
        put(img, x, y1, rgb);
        put(img, x, y2, rgb);
    }
    for y in y1..=y2 {
        put(img, x1, y, rgb);
        put(img, x2, y, rgb);
    }
}

fn cross(img: &mut Image, (x, y): (f64, f64), rgb: [f32; 3]) {
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    for d in -2..=2 {
        put(img, cx + d, cy, rgb);
        put(img, cx, cy + d, rgb);
    }
}

pub fn annotate(image: &Image, marks: &[Mark]) -> Image {
    let mut out = image.clone();
    for m in marks {
        rect(&mut out, &m.bbox, if m.class_id == RIPE { RIPE_RGB } else { UNRIPE_RGB });
    }
    for c in marks.iter().filter_map(|m| m.center) {
        cross(&mut out, c, CENTER_RGB);
    }
    out
}
