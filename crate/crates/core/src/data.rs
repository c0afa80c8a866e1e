//! Images, annotations and the on-disk dataset layout.
//!
//! A dataset root holds `images/<id>.ppm` (or `.png`), `labels/<id>.txt`, optional
//! `masks/<id>.txt` and one `<split>/manifest.txt` per split listing ids.
//! Label lines are `class cx cy w h [pcx pcy]`, normalised to `[0, 1]`.
//! Mask lines are `cx cy r` in pixels, one per label line in paint order.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ripeloc_tensor::Tensor;

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::BBox;
use crate::loss::GtBox;
use crate::postprocess::RIPE;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Independent random stream `index` of a seed.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Interleaved RGB in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut im = Self::new(width, height);
        for px in im.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        im
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads an 8-bit RGB or RGBA PNG; alpha is dropped, grey is expanded.
    pub fn read_png(path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
        let mut dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        let stride = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(bad("unexpanded palette".into())),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let row = &buf[y * info.line_size..y * info.line_size + w * stride];
            for px in row.chunks_exact(stride) {
                let rgb = if stride < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
                data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    /// Reads a PPM or PNG, chosen by extension.
    pub fn read(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => Self::read_png(path),
            _ => Self::read_ppm(path),
        }
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
        Ok(Self {
            width: w,
            height: h,
            data: body.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

/// Visible pixels of one fruit, in image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.width
            && y < self.y0 + self.height
            && self.bits[(y - self.y0) * self.width + (x - self.x0)]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight pixel box `[x1, y1, x2, y2)` of the set bits.
    pub fn bounds(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.bits[y * self.width + x] {
                    let (px, py) = (x + self.x0, y + self.y0);
                    b = Some(match b {
                        None => [px, py, px + 1, py + 1],
                        Some(c) => [c[0].min(px), c[1].min(py), c[2].max(px + 1), c[3].max(py + 1)],
                    });
                }
            }
        }
        b
    }
}

/// One object. Geometry is normalised to the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
    pub center: Option<(f64, f64)>,
    pub mask: Option<Mask>,
    /// Source disk `(cx, cy, r)` in pixels, when synthetic.
    pub disk: Option<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    /// Ground truth in input pixels for the loss and the metrics.
    pub fn gt_boxes(&self) -> Vec<GtBox> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        self.annotations
            .iter()
            .map(|a| GtBox {
                class_id: a.class_id,
                bbox: [a.bbox[0] * w, a.bbox[1] * h, a.bbox[2] * w, a.bbox[3] * h],
            })
            .collect()
    }

    /// Boxes and picking points in pixels, as the metrics expect them.
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.gt_boxes()
            .into_iter()
            .zip(self.centers_px())
            .map(|(g, c)| GroundTruth {
                class_id: g.class_id,
                bbox: g.bbox,
                center: c,
            })
            .collect()
    }

    /// Pixel-space ripe centres aligned with `annotations`.
    pub fn centers_px(&self) -> Vec<Option<(f64, f64)>> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        self.annotations.iter().map(|a| a.center.map(|(x, y)| (x * w, y * h))).collect()
    }
}

/// Packs square samples of side `size` into an `N × 3 × size × size` tensor.
pub fn batch_tensor(samples: &[&Sample], size: usize) -> Result<Tensor> {
    let plane = size * size;
    let mut data = vec![0.0; samples.len() * 3 * plane];
    for (n, s) in samples.iter().enumerate() {
        if s.image.width != size || s.image.height != size {
            return Err(Error::Data(format!(
                "image is {}×{}, model expects {size}×{size}",
                s.image.width, s.image.height
            )));
        }
        for (p, px) in s.image.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * plane + p] = f64::from(px[c]);
            }
        }
    }
    Ok(Tensor::new(&[samples.len(), 3, size, size], data)?)
}

/// Serialises annotations to label lines.
pub fn format_labels(annots: &[Annotation]) -> String {
    let mut s = String::new();
    for a in annots {
        let b = a.bbox;
        s.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            a.class_id,
            0.5 * (b[0] + b[2]),
            0.5 * (b[1] + b[3]),
            b[2] - b[0],
            b[3] - b[1]
        ));
        if let Some((x, y)) = a.center {
            s.push_str(&format!(" {x:.6} {y:.6}"));
        }
        s.push('\n');
    }
    s
}

/// Parses label lines; rejects malformed lines and empty boxes.
pub fn parse_labels(text: &str, origin: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| Error::Data(format!("{origin}:{}: {m}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 && f.len() != 7 {
            return Err(bad(format!("expected 5 or 7 fields, got {}", f.len())));
        }
        let class_id = f[0].parse::<usize>().map_err(|_| bad(format!("bad class {:?}", f[0])))?;
        let v = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if !(v[2] > 0.0 && v[3] > 0.0) {
            return Err(bad("zero-area box".into()));
        }
        let bbox = [v[0] - v[2] / 2.0, v[1] - v[3] / 2.0, v[0] + v[2] / 2.0, v[1] + v[3] / 2.0];
        if bbox.iter().any(|c| !(-1e-6..=1.0 + 1e-6).contains(c)) {
            return Err(bad("box outside the image".into()));
        }
        let center = if v.len() == 6 { Some((v[4], v[5])) } else { None };
        if center.is_some() && class_id != RIPE {
            return Err(bad("only ripe fruit carries a picking point".into()));
        }
        out.push(Annotation {
            class_id,
            bbox: bbox.map(|c| c.clamp(0.0, 1.0)),
            center,
            mask: None,
            disk: None,
        });
    }
    Ok(out)
}

/// Rebuilds visible masks from disks painted in order (later on top).
pub fn masks_from_disks(width: usize, height: usize, disks: &[(f64, f64, f64)]) -> Vec<Mask> {
    let mut owner: Vec<Option<usize>> = vec![None; width * height];
    for (k, &(cx, cy, r)) in disks.iter().enumerate() {
        let (x0, x1) = (((cx - r).floor().max(0.0)) as usize, ((cx + r).ceil().max(0.0) as usize).min(width));
        let (y0, y1) = (((cy - r).floor().max(0.0)) as usize, ((cy + r).ceil().max(0.0) as usize).min(height));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    owner[y * width + x] = Some(k);
                }
            }
        }
    }
    disks
        .iter()
        .enumerate()
        .map(|(k, &(cx, cy, r))| {
            let x0 = ((cx - r).floor().max(0.0) as usize).min(width);
            let y0 = ((cy - r).floor().max(0.0) as usize).min(height);
            let x1 = ((cx + r).ceil().max(0.0) as usize).min(width);
            let y1 = ((cy + r).ceil().max(0.0) as usize).min(height);
            let (w, h) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
            let mut bits = vec![false; w * h];
            for y in 0..h {
                for x in 0..w {
                    bits[y * w + x] = owner[(y + y0) * width + x + x0] == Some(k);
                }
            }
            Mask {
                x0,
                y0,
                width: w,
                height: h,
                bits,
            }
        })
        .collect()
}

/// Location of a dataset root on disk.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn image_path(&self, id: &str) -> PathBuf {
        let ppm = self.root.join("images").join(format!("{id}.ppm"));
        let png = ppm.with_extension("png");
        if !ppm.exists() && png.exists() {
            png
        } else {
            ppm
        }
    }

    fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.txt"))
    }

    fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.txt"))
    }

    pub fn manifest_path(&self, split: &str) -> PathBuf {
        self.root.join(split).join("manifest.txt")
    }

    pub fn write_sample(&self, id: &str, s: &Sample) -> Result<()> {
        for d in ["images", "labels", "masks"] {
            fs::create_dir_all(self.root.join(d))?;
        }
        s.image.write_ppm(&self.image_path(id))?;
        fs::write(self.label_path(id), format_labels(&s.annotations))?;
        if s.annotations.iter().all(|a| a.disk.is_some()) {
            let mut m = String::new();
            for a in &s.annotations {
                let (x, y, r) = a.disk.unwrap_or_default();
                m.push_str(&format!("{x:.6} {y:.6} {r:.6}\n"));
            }
            fs::write(self.mask_path(id), m)?;
        }
        Ok(())
    }

    pub fn write_manifest(&self, split: &str, ids: &[String]) -> Result<()> {
        let p = self.manifest_path(split);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut s = ids.join("\n");
        s.push('\n');
        fs::write(p, s)?;
        Ok(())
    }

    pub fn read_manifest(&self, split: &str) -> Result<Vec<String>> {
        let p = self.manifest_path(split);
        let f = fs::File::open(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let mut ids = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                ids.push(t.to_string());
            }
        }
        Ok(ids)
    }

    pub fn read_sample(&self, id: &str) -> Result<Sample> {
        let ip = self.image_path(id);
        if !ip.exists() {
            return Err(Error::Data(format!("missing image {}", ip.display())));
        }
        let image = Image::read(&ip)?;
        let lp = self.label_path(id);
        let text = fs::read_to_string(&lp).map_err(|e| Error::Data(format!("{}: {e}", lp.display())))?;
        let mut annotations = parse_labels(&text, &lp.display().to_string())?;
        let mp = self.mask_path(id);
        if mp.exists() {
            let mut disks = Vec::new();
            for line in fs::read_to_string(&mp)?.lines().filter(|l| !l.trim().is_empty()) {
                let v: Vec<f64> = line
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Data(format!("{}: bad mask line", mp.display())))?;
                if v.len() != 3 {
                    return Err(Error::Data(format!("{}: bad mask line", mp.display())));
                }
                disks.push((v[0], v[1], v[2]));
            }
            if disks.len() != annotations.len() {
                return Err(Error::Data(format!("{}: mask count mismatch", mp.display())));
            }
            for (a, (m, d)) in annotations
                .iter_mut()
                .zip(masks_from_disks(image.width, image.height, &disks).into_iter().zip(disks))
            {
                a.mask = Some(m);
                a.disk = Some(d);
            }
        }
        Ok(Sample { image, annotations })
    }

    pub fn read_split(&self, split: &str) -> Result<Vec<(String, Sample)>> {
        self.read_manifest(split)?
            .into_iter()
            .map(|id| self.read_sample(&id).map(|s| (id, s)))
            .collect()
    }
}
