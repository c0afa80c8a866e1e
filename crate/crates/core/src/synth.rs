//! Deterministic synthetic greenhouse scenes: shaded fruit disks over leaf
//! and stem clutter, with exact boxes, centres and visibility masks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::augment::hsv_to_rgb;
use crate::data::{masks_from_disks, stream, Annotation, DatasetDir, Image, Sample, SPLITS};
use crate::error::{Error, Result};
use crate::postprocess::{RIPE, UNRIPE};

pub const RIPE_HUE: (f64, f64) = (345.0, 375.0);
pub const UNRIPE_HUE: (f64, f64) = (90.0, 140.0);
const MAX_ATTEMPTS: usize = 100;
/// Smallest visible fraction of a disk accepted during placement.
const MIN_VISIBLE: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Illumination {
    Morning,
    Midday,
    Afternoon,
}

impl Illumination {
    pub const ALL: [Illumination; 3] = [Illumination::Morning, Illumination::Midday, Illumination::Afternoon];

    /// Gain, RGB tint and specular strength.
    fn light(self) -> (f64, [f64; 3], f64) {
        match self {
            Illumination::Morning => (0.82, [0.95, 1.0, 1.08], 0.35),
            Illumination::Midday => (1.05, [1.0, 1.0, 1.0], 0.6),
            Illumination::Afternoon => (0.88, [1.1, 0.98, 0.85], 0.4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FruitCount {
    /// Independent uniform ranges per class (inclusive).
    Ranges { ripe: (usize, usize), unripe: (usize, usize) },
    /// `1 + Poisson(mean − 1)` fruit capped at `max`, each ripe with
    /// probability `ripe_share`.
    Mixed { mean: f64, max: usize, ripe_share: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub count: FruitCount,
    /// Disk radius range in pixels.
    pub radius: (f64, f64),
    pub occlusion_p: f64,
    /// Leaves per 1000 px²; stems are a third of that.
    pub clutter_density: f64,
    /// Leaf hue range in degrees; overlap with the unripe range makes
    /// green-on-green scenes harder.
    pub leaf_hue: (f64, f64),
    /// `None` draws a preset per image.
    pub illumination: Option<Illumination>,
    pub noise: f64,
    /// Replaces both class hue ranges when set.
    pub fruit_hue: Option<(f64, f64)>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 96,
            count: FruitCount::Mixed {
                mean: 4.2,
                max: 9,
                ripe_share: 0.573,
            },
            radius: (6.0, 14.0),
            occlusion_p: 0.3,
            clutter_density: 0.6,
            leaf_hue: (75.0, 150.0),
            illumination: None,
            noise: 0.015,
            fruit_hue: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(self.radius.0 > 0.5 && self.radius.0 <= self.radius.1) {
            return bad("radius range must satisfy 0.5 < min ≤ max");
        }
        if !(0.0..=1.0).contains(&self.occlusion_p) {
            return bad("occlusion_p must lie in [0, 1]");
        }
        if self.clutter_density < 0.0 || self.noise < 0.0 {
            return bad("clutter_density and noise must be non-negative");
        }
        match self.count {
            FruitCount::Ranges { ripe, unripe } if ripe.0 > ripe.1 || unripe.0 > unripe.1 => bad("empty count range"),
            FruitCount::Mixed { mean, ripe_share, .. } if mean < 1.0 || !(0.0..=1.0).contains(&ripe_share) => {
                bad("mixed count needs mean ≥ 1 and ripe_share in [0, 1]")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub sample: Sample,
    pub requested: usize,
    /// Fruit dropped because no placement passed within the attempt budget.
    pub dropped: usize,
    pub illumination: Illumination,
    /// Number of fruit whose visible area is below 95% of the disk.
    pub occluded: usize,
}

impl SynthOutput {
    /// Stratification bucket: illumination × occlusion level (0, 1, 2+).
    pub fn difficulty(&self) -> usize {
        let light = Illumination::ALL.iter().position(|&i| i == self.illumination).unwrap_or(0);
        light * 3 + self.occluded.min(2)
    }
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    hsv_to_rgb([h.rem_euclid(360.0), s, v])
}

fn paint_ellipse(img: &mut [[f64; 3]], n: usize, c: (f64, f64), axes: (f64, f64), angle: f64, rgb: [f64; 3]) {
    let (ca, sa) = (angle.cos(), angle.sin());
    let reach = axes.0.max(axes.1);
    let (x0, x1) = ((c.0 - reach).floor().max(0.0) as usize, ((c.0 + reach).ceil().max(0.0) as usize).min(n));
    let (y0, y1) = ((c.1 - reach).floor().max(0.0) as usize, ((c.1 + reach).ceil().max(0.0) as usize).min(n));
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - c.0, y as f64 + 0.5 - c.1);
            let (u, v) = (dx * ca + dy * sa, -dx * sa + dy * ca);
            let q = (u / axes.0).powi(2) + (v / axes.1).powi(2);
            if q <= 1.0 {
                // Darker rim, brighter midrib.
                let k = 0.8 + 0.2 * (1.0 - q);
                img[y * n + x] = rgb.map(|ch| ch * k);
            }
        }
    }
}

fn paint_background(rng: &mut impl Rng, spec: &SceneSpec) -> Vec<[f64; 3]> {
    let n = spec.image_size;
    let top = hsv(uniform(rng, (25.0, 60.0)), uniform(rng, (0.15, 0.4)), uniform(rng, (0.35, 0.55)));
    let bottom = hsv(uniform(rng, (20.0, 45.0)), uniform(rng, (0.25, 0.5)), uniform(rng, (0.2, 0.4)));
    let mut img = vec![[0.0; 3]; n * n];
    for y in 0..n {
        let t = y as f64 / (n - 1) as f64;
        for x in 0..n {
            img[y * n + x] = std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t);
        }
    }
    let area = (n * n) as f64 / 1000.0;
    let leaves = (spec.clutter_density * area).round() as usize;
    let stems = (spec.clutter_density * area / 3.0).round() as usize;
    let s = n as f64 / 96.0;
    for _ in 0..stems {
        let rgb = hsv(uniform(rng, (60.0, 100.0)), uniform(rng, (0.3, 0.6)), uniform(rng, (0.3, 0.5)));
        let c = (uniform(rng, (0.0, n as f64)), uniform(rng, (0.0, n as f64)));
        let len = uniform(rng, (10.0, 40.0)) * s;
        let width = uniform(rng, (0.6, 1.4)) * s;
        paint_ellipse(&mut img, n, c, (len / 2.0, width), uniform(rng, (0.0, std::f64::consts::PI)), rgb);
    }
    for _ in 0..leaves {
        let rgb = hsv(uniform(rng, spec.leaf_hue), uniform(rng, (0.4, 0.8)), uniform(rng, (0.25, 0.6)));
        let c = (uniform(rng, (0.0, n as f64)), uniform(rng, (0.0, n as f64)));
        let axes = (uniform(rng, (4.0, 14.0)) * s, uniform(rng, (2.0, 6.0)) * s);
        paint_ellipse(&mut img, n, c, axes, uniform(rng, (0.0, std::f64::consts::PI)), rgb);
    }
    img
}

struct Fruit {
    class_id: usize,
    disk: (f64, f64, f64),
    hsv: [f64; 3],
}

fn class_list(rng: &mut impl Rng, count: &FruitCount) -> Vec<usize> {
    let mut classes = Vec::new();
    match *count {
        FruitCount::Ranges { ripe, unripe } => {
            let nr = rng.random_range(ripe.0..=ripe.1);
            let nu = rng.random_range(unripe.0..=unripe.1);
            classes.extend(std::iter::repeat_n(RIPE, nr));
            classes.extend(std::iter::repeat_n(UNRIPE, nu));
            classes.shuffle(rng);
        }
        FruitCount::Mixed { mean, max, ripe_share } => {
            let extra = if mean > 1.0 {
                Poisson::new(mean - 1.0).map(|p| p.sample(rng) as usize).unwrap_or(0)
            } else {
                0
            };
            let n = (1 + extra).min(max.max(1));
            for _ in 0..n {
                classes.push(if rng.random_bool(ripe_share) { RIPE } else { UNRIPE });
            }
        }
    }
    classes
}

/// Checks that every disk keeps enough visible area and a visible box that
/// contains its true centre, with the newest disk painted last.
fn placement_ok(n: usize, disks: &[(f64, f64, f64)]) -> bool {
    let masks = masks_from_disks(n, n, disks);
    disks.iter().zip(&masks).all(|(&(cx, cy, r), m)| {
        let full = std::f64::consts::PI * r * r;
        let Some(b) = m.bounds() else { return false };
        m.area() as f64 >= MIN_VISIBLE * full
            && cx > b[0] as f64
            && cx < b[2] as f64
            && cy > b[1] as f64
            && cy < b[3] as f64
    })
}

/// Renders one scene. The output is a pure function of `spec` and the
/// generator state.
pub fn generate(spec: &SceneSpec, rng: &mut impl Rng) -> Result<SynthOutput> {
    spec.validate()?;
    let n = spec.image_size;
    let nf = n as f64;
    let illumination = spec
        .illumination
        .unwrap_or_else(|| Illumination::ALL[rng.random_range(0..3)]);
    let mut img = paint_background(rng, spec);

    let classes = class_list(rng, &spec.count);
    let requested = classes.len();
    let mut fruits: Vec<Fruit> = Vec::new();
    let scale = nf / 96.0;
    for class_id in classes {
        let r = uniform(rng, spec.radius);
        let overlap = !fruits.is_empty() && rng.random_bool(spec.occlusion_p);
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let (cx, cy) = if overlap {
                let host = &fruits[rng.random_range(0..fruits.len())].disk;
                let d = uniform(rng, (0.6, 1.0)) * (r + host.2);
                let a = uniform(rng, (0.0, std::f64::consts::TAU));
                (host.0 + d * a.cos(), host.1 + d * a.sin())
            } else {
                (uniform(rng, (0.0, nf)), uniform(rng, (0.0, nf)))
            };
            if !(cx > 0.0 && cx < nf && cy > 0.0 && cy < nf) {
                continue;
            }
            if !overlap
                && fruits
                    .iter()
                    .any(|f| (f.disk.0 - cx).hypot(f.disk.1 - cy) < f.disk.2 + r + scale)
            {
                continue;
            }
            let mut disks: Vec<_> = fruits.iter().map(|f| f.disk).collect();
            disks.push((cx, cy, r));
            if placement_ok(n, &disks) {
                placed = Some((cx, cy, r));
                break;
            }
        }
        let Some(disk) = placed else { continue };
        let hue = if let Some(range) = spec.fruit_hue {
            uniform(rng, range)
        } else if class_id == RIPE {
            uniform(rng, RIPE_HUE)
        } else {
            uniform(rng, UNRIPE_HUE)
        };
        let hsv = [hue, uniform(rng, (0.6, 0.9)), uniform(rng, (0.65, 0.95))];
        fruits.push(Fruit { class_id, disk, hsv });
    }

    let (gain, tint, spec_k) = illumination.light();
    let light = {
        let l = [-0.4f64, -0.5, 0.77];
        let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        l.map(|v| v / norm)
    };
    for f in &fruits {
        let (cx, cy, r) = f.disk;
        let base = hsv(f.hsv[0], f.hsv[1], f.hsv[2]);
        let (hx, hy, hs) = (cx - 0.35 * r, cy - 0.4 * r, 0.18 * r);
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(n));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = ((px - cx) / r, (py - cy) / r);
                let q = dx * dx + dy * dy;
                if q > 1.0 {
                    continue;
                }
                let nz = (1.0 - q).sqrt();
                let lambert = (dx * light[0] + dy * light[1] + nz * light[2]).max(0.0);
                let shade = 0.35 + 0.65 * lambert;
                let spec = spec_k * (-((px - hx).powi(2) + (py - hy).powi(2)) / (2.0 * hs * hs)).exp();
                img[y * n + x] = std::array::from_fn(|c| base[c] * shade * gain * tint[c] + spec);
            }
        }
    }
    let mut image = Image::new(n, n);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    for (p, rgb) in img.iter().enumerate() {
        for c in 0..3 {
            let v = if spec.noise > 0.0 { rgb[c] + noise.sample(rng) } else { rgb[c] };
            image.data[p * 3 + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    image.quantize();

    let disks: Vec<_> = fruits.iter().map(|f| f.disk).collect();
    let masks = masks_from_disks(n, n, &disks);
    let mut occluded = 0;
    let mut annotations = Vec::with_capacity(fruits.len());
    for (f, m) in fruits.iter().zip(masks) {
        let (cx, cy, r) = f.disk;
        let full = masks_from_disks(n, n, &[f.disk])[0].area().max(1);
        if (m.area() as f64) < 0.95 * full as f64 {
            occluded += 1;
        }
        let b = m.bounds().ok_or_else(|| Error::Numeric("placed fruit lost its mask".into()))?;
        annotations.push(Annotation {
            class_id: f.class_id,
            bbox: [b[0] as f64 / nf, b[1] as f64 / nf, b[2] as f64 / nf, b[3] as f64 / nf],
            center: (f.class_id == RIPE).then_some((cx / nf, cy / nf)),
            mask: Some(m),
            disk: Some((cx, cy, r)),
        });
    }
    let placed = annotations.len();
    Ok(SynthOutput {
        sample: Sample { image, annotations },
        requested,
        dropped: requested - placed,
        illumination,
        occluded,
    })
}

/// Scene `index` of a dataset seeded with `seed`.
pub fn generate_indexed(spec: &SceneSpec, seed: u64, index: u64) -> Result<SynthOutput> {
    generate(spec, &mut stream(seed, index))
}

/// Largest-remainder apportionment of `n` items: floors first, then one
/// extra item per split in order of decreasing fractional part, earlier
/// splits winning ties.
pub fn apportion(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Stratified split of items with the given difficulty buckets. Totals follow
/// [`apportion`]; items are visited bucket by bucket (shuffled within each)
/// and dealt to the split furthest behind its pro-rata share, so every
/// bucket is spread across splits in proportion.
pub fn make_splits(buckets: &[usize], ratios: [f64; 3], rng: &mut impl Rng) -> Result<[Vec<usize>; 3]> {
    let n = buckets.len();
    let target = apportion(n, &ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| buckets[i]);
    let mut out: [Vec<usize>; 3] = Default::default();
    for (k, &item) in order.iter().enumerate() {
        let pos = (k + 1) as f64;
        let pick = (0..3)
            .filter(|&s| out[s].len() < target[s])
            .max_by(|&a, &b| {
                let da = target[a] as f64 * pos / n as f64 - out[a].len() as f64;
                let db = target[b] as f64 * pos / n as f64 - out[b].len() as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .ok_or_else(|| Error::Numeric("split capacities exhausted".into()))?;
        out[pick].push(item);
    }
    for s in &mut out {
        s.sort_unstable();
    }
    Ok(out)
}

/// A generated dataset held in memory.
pub struct SynthDataset {
    pub samples: Vec<Sample>,
    pub difficulty: Vec<usize>,
    pub splits: [Vec<usize>; 3],
    pub dropped: usize,
}

impl SynthDataset {
    pub fn split(&self, k: usize) -> Vec<&Sample> {
        self.splits[k].iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn id(index: usize) -> String {
        format!("img_{index:05}")
    }

    /// Writes every sample plus one manifest per split.
    pub fn write(&self, dir: &DatasetDir) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            dir.write_sample(&Self::id(i), s)?;
        }
        for (k, name) in SPLITS.iter().enumerate() {
            let ids: Vec<String> = self.splits[k].iter().map(|&i| Self::id(i)).collect();
            dir.write_manifest(name, &ids)?;
        }
        Ok(())
    }
}

/// Generates `n` scenes and splits them stratified by difficulty.
pub fn synth_dataset(spec: &SceneSpec, n: usize, ratios: [f64; 3], seed: u64) -> Result<SynthDataset> {
    let mut samples = Vec::with_capacity(n);
    let mut difficulty = Vec::with_capacity(n);
    let mut dropped = 0;
    for i in 0..n {
        let out = generate_indexed(spec, seed, i as u64)?;
        difficulty.push(out.difficulty());
        dropped += out.dropped;
        samples.push(out.sample);
    }
    let splits = make_splits(&difficulty, ratios, &mut stream(seed, u64::MAX))?;
    Ok(SynthDataset {
        samples,
        difficulty,
        splits,
        dropped,
    })
}
