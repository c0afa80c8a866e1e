//! Command option structs and their implementations.
//!
//! Option fields are all optional so that a config file and flags can be
//! layered; defaults are applied after layering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use ripeloc_core::augment::{augment, AugConfig, AugStrength};
use ripeloc_core::data::{stream, DatasetDir, Image, Sample};
use ripeloc_core::eval::{evaluate, pr_csv, ImageEval};
use ripeloc_core::model::Group;
use ripeloc_core::postprocess::{format_detections, parse_detections, postprocess, PostConfig, DEFAULT_CONF, DEFAULT_IOU};
use ripeloc_core::pruner::{finetune, prune as prune_model, FINETUNE_EPOCHS};
use ripeloc_core::synth::{synth_dataset, SceneSpec};
use ripeloc_core::trainer::{
    baseline_plan, detect_all, frozen_plan, make_phase_plan, pretrain as run_pretrain, train as run_train,
    transfer_weights, LogRow, PhaseConfig, PretrainConfig, TrainConfig,
};
use ripeloc_core::{build_model, HeadKind, Model, ModelConfig, NeckKind};

use crate::draw::{annotate, Mark};
use crate::error::{CliError, CliResult};

const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    /// Frozen backbone, then partial, then full unfreezing.
    ThreePhase,
    /// One unfrozen phase.
    Baseline,
    /// One phase with the backbone frozen throughout.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HsvPreset {
    Greenhouse,
    Stock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strength {
    Heavy,
    Moderate,
    Light,
}

impl From<Strength> for AugStrength {
    fn from(s: Strength) -> Self {
        match s {
            Strength::Heavy => AugStrength::Heavy,
            Strength::Moderate => AugStrength::Moderate,
            Strength::Light => AugStrength::Light,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neck {
    Lightweight,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Compact,
    Decoupled,
}

fn req<T>(v: Option<T>, name: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::usage(format!("missing required option --{}", name.replace('_', "-"))))
}

fn need_file(p: &Path, what: &str) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{what} {} does not exist", p.display())))
    }
}

fn need_split(ds: &DatasetDir, split: &str) -> CliResult<()> {
    let m = ds.manifest_path(split);
    if m.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{} has no {split} split (missing {})",
            ds.root.display(),
            m.display()
        )))
    }
}

fn prepare_out(p: &Path) -> CliResult<()> {
    if p.exists() && !p.is_dir() {
        return Err(CliError::usage(format!("output {} exists and is not a directory", p.display())));
    }
    fs::create_dir_all(p).map_err(|e| CliError::data(format!("cannot create {}: {e}", p.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn check_ratio(v: f64, name: &str) -> CliResult<f64> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::usage(format!("--{name} must lie in [0, 1], got {v}")))
    }
}

fn read_split_samples(ds: &DatasetDir, split: &str) -> CliResult<(Vec<String>, Vec<Sample>)> {
    let (ids, samples) = ds.read_split(split)?.into_iter().unzip();
    Ok((ids, samples))
}

fn progress(tag: &str) -> impl FnMut(&LogRow) + '_ {
    move |r: &LogRow| {
        let val = r.val_map50.map(|v| format!(" val_map50={v:.4}")).unwrap_or_default();
        eprintln!(
            "{tag} phase={} epoch={} lr={:.6} box={:.4} cls={:.4} dfl={:.4}{val}",
            r.phase, r.epoch, r.lr, r.box_loss, r.cls_loss, r.dfl_loss
        );
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOpts {
    /// Dataset root to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of images [default: 800].
    #[arg(long)]
    pub images: Option<usize>,
    /// Train, val and test fractions [default: 0.75,0.125,0.125].
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Generator seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side in pixels [default: 96].
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Scene generator settings (config file only).
    #[arg(skip)]
    pub scene: Option<SceneSpec>,
}

pub fn synth(o: SynthOpts) -> CliResult<()> {
    let out = req(o.out, "out")?;
    let n = o.images.unwrap_or(800);
    if n == 0 {
        return Err(CliError::usage("--images must be positive"));
    }
    let ratios = o.ratios.unwrap_or_else(|| vec![0.75, 0.125, 0.125]);
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| CliError::usage("--ratios needs exactly three values"))?;
    let mut spec = o.scene.unwrap_or_default();
    if let Some(s) = o.image_size {
        spec.image_size = s;
    }
    spec.validate()?;
    prepare_out(&out)?;
    let ds = synth_dataset(&spec, n, ratios, o.seed.unwrap_or(0))?;
    ds.write(&DatasetDir::new(&out))?;
    print_json(&serde_json::json!({
        "dataset": out,
        "images": n,
        "train": ds.splits[0].len(),
        "val": ds.splits[1].len(),
        "test": ds.splits[2].len(),
        "dropped_fruit": ds.dropped,
    }));
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    /// Dataset root with train and val manifests.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for weights.rlw, log.csv and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Width multiple: 0.125, 0.25, 0.5 or 1 [default: 0.125].
    #[arg(long)]
    pub width: Option<f64>,
    /// Model input side [default: side of the first training image].
    #[arg(long)]
    pub image_size: Option<usize>,
    /// [default: lightweight]
    #[arg(long, value_enum)]
    pub neck: Option<Neck>,
    /// [default: compact]
    #[arg(long, value_enum)]
    pub head: Option<Head>,
    /// Training schedule [default: three-phase].
    #[arg(long, value_enum)]
    pub plan: Option<PlanKind>,
    /// Multiplier on every phase's epoch count [default: 1].
    #[arg(long)]
    pub epoch_scale: Option<f64>,
    /// Seed for initialisation, shuffling and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Colour-jitter gains [default: greenhouse].
    #[arg(long, value_enum)]
    pub hsv: Option<HsvPreset>,
    /// Validate every N epochs, 0 for phase ends only [default: 1].
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Epochs of class-agnostic synthetic pretraining, 0 to skip [default: 12].
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Images generated for pretraining [default: 600].
    #[arg(long)]
    pub pretrain_images: Option<usize>,
    /// Start from these weights instead of pretraining.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Explicit phase list replacing --plan (config file only).
    #[arg(skip)]
    pub phases: Option<Vec<PhaseConfig>>,
    /// Full trainer settings (config file only); flags above override it.
    #[arg(skip)]
    pub trainer: Option<TrainConfig>,
}

fn first_image_side(ds: &DatasetDir) -> CliResult<usize> {
    let id = ds
        .read_manifest("train")?
        .into_iter()
        .next()
        .ok_or_else(|| CliError::data("train split is empty"))?;
    Ok(ds.read_sample(&id)?.image.width)
}

fn apply_hsv(aug: &mut AugConfig, preset: HsvPreset) {
    let p = match preset {
        HsvPreset::Greenhouse => AugConfig::greenhouse(),
        HsvPreset::Stock => AugConfig::stock_hsv(),
    };
    aug.hsv_h = p.hsv_h;
    aug.hsv_s = p.hsv_s;
    aug.hsv_v = p.hsv_v;
}

pub fn train(o: TrainOpts) -> CliResult<()> {
    let data = req(o.data.clone(), "data")?;
    let out = req(o.out.clone(), "out")?;
    let ds = DatasetDir::new(&data);
    need_split(&ds, "train")?;
    need_split(&ds, "val")?;
    if let Some(p) = &o.init {
        need_file(p, "initial weights")?;
    }
    let size = match o.image_size {
        Some(s) => s,
        None => first_image_side(&ds)?,
    };
    let mut mcfg = ModelConfig::new(o.width.unwrap_or(0.125), NUM_CLASSES, size);
    mcfg.neck = match o.neck.unwrap_or(Neck::Lightweight) {
        Neck::Lightweight => NeckKind::Lightweight,
        Neck::Dense => NeckKind::Dense,
    };
    mcfg.head = match o.head.unwrap_or(Head::Compact) {
        Head::Compact => HeadKind::Compact,
        Head::Decoupled => HeadKind::Decoupled,
    };
    mcfg.validate()?;
    let scale = o.epoch_scale.unwrap_or(1.0);
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CliError::usage("--epoch-scale must be positive"));
    }
    let plan = match &o.phases {
        Some(p) => p.clone(),
        None => match o.plan.unwrap_or(PlanKind::ThreePhase) {
            PlanKind::ThreePhase => make_phase_plan(scale),
            PlanKind::Baseline => baseline_plan(scale),
            PlanKind::Frozen => frozen_plan(scale),
        },
    };
    if plan.is_empty() {
        return Err(CliError::usage("phase list is empty"));
    }
    for p in &plan {
        p.validate()?;
    }
    let mut tcfg = o.trainer.clone().unwrap_or_default();
    if let Some(s) = o.seed {
        tcfg.seed = s;
    }
    if let Some(b) = o.batch_size {
        tcfg.batch_size = b;
    }
    if let Some(h) = o.hsv {
        apply_hsv(&mut tcfg.aug, h);
    }
    if let Some(v) = o.val_every {
        tcfg.val_every = v;
    }
    tcfg.aug.validate()?;
    prepare_out(&out)?;

    let (_, train_s) = read_split_samples(&ds, "train")?;
    let (_, val_s) = read_split_samples(&ds, "val")?;
    let mut model = build_model(&mcfg, tcfg.seed)?;
    let pre_epochs = o.pretrain_epochs.unwrap_or(12);
    if let Some(p) = &o.init {
        let src = Model::load(p)?;
        if transfer_weights(&src, &mut model) == 0 {
            return Err(CliError::data(format!("{} shares no tensors with this model", p.display())));
        }
    } else if pre_epochs > 0 {
        let pcfg = PretrainConfig {
            epochs: pre_epochs,
            images: o.pretrain_images.unwrap_or(PretrainConfig::default().images),
            batch_size: tcfg.batch_size,
            ..PretrainConfig::default()
        };
        let scene = SceneSpec {
            image_size: size,
            ..SceneSpec::default()
        };
        let (pre, plog) = run_pretrain(&mcfg, &scene, &pcfg)?;
        fs::write(out.join("pretrain_log.csv"), plog.to_csv())?;
        transfer_weights(&pre, &mut model);
    }
    let train_refs: Vec<&Sample> = train_s.iter().collect();
    let val_refs: Vec<&Sample> = val_s.iter().collect();
    let mut hook = progress("train");
    let log = run_train(&mut model, &train_refs, &val_refs, &plan, &tcfg, Some(&mut hook))?;
    let weights = out.join("weights.rlw");
    model.save(&weights)?;
    fs::write(out.join("log.csv"), log.to_csv())?;
    write_json(&out.join("run.json"), &o)?;
    let last = log.rows.iter().rev().find_map(|r| r.val_map50.zip(r.val_map5095));
    print_json(&serde_json::json!({
        "weights": weights,
        "epochs": log.rows.len(),
        "steps": log.steps,
        "nan_incidents": log.nan_incidents,
        "val_map50": last.map(|v| v.0),
        "val_map5095": last.map(|v| v.1),
    }));
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOpts {
    /// Dataset root holding the ground truth.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to score [default: test].
    #[arg(long)]
    pub split: Option<String>,
    /// Model weights to run (exclusive with --detections).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Detection text file to score instead of running a model.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Output directory for metrics.json and pr.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Operating-point confidence for precision, recall and centres [default: 0.4].
    #[arg(long)]
    pub conf: Option<f64>,
    /// Lowest confidence kept when running a model, for the AP curves [default: 0.001].
    #[arg(long)]
    pub conf_floor: Option<f64>,
    /// NMS IoU threshold when running a model [default: 0.45].
    #[arg(long)]
    pub iou: Option<f64>,
}

fn images_from_detections(path: &Path, ids: &[String], samples: &[Sample]) -> CliResult<Vec<ImageEval>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut by_id: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for (id, d) in parse_detections(&text)? {
        if d.class_id >= NUM_CLASSES {
            return Err(CliError::data(format!("detection for {id} has class {}", d.class_id)));
        }
        by_id.entry(id).or_default().push(d);
    }
    let mut images = Vec::with_capacity(ids.len());
    for (id, s) in ids.iter().zip(samples) {
        images.push(ImageEval {
            dets: by_id.remove(id).unwrap_or_default(),
            gts: s.ground_truth(),
        });
    }
    if let Some(id) = by_id.keys().next() {
        return Err(CliError::data(format!("detections name image {id}, which is not in the split")));
    }
    Ok(images)
}

pub fn eval(o: EvalOpts) -> CliResult<()> {
    let data = req(o.data, "data")?;
    let out = req(o.out, "out")?;
    let split = o.split.unwrap_or_else(|| "test".into());
    let conf = check_ratio(o.conf.unwrap_or(DEFAULT_CONF), "conf")?;
    let ds = DatasetDir::new(&data);
    need_split(&ds, &split)?;
    match (&o.weights, &o.detections) {
        (Some(w), None) => need_file(w, "weights")?,
        (None, Some(d)) => need_file(d, "detection file")?,
        _ => return Err(CliError::usage("give exactly one of --weights and --detections")),
    }
    prepare_out(&out)?;
    let (ids, samples) = read_split_samples(&ds, &split)?;
    let images = if let Some(w) = &o.weights {
        let mut model = Model::load(w)?;
        let post = PostConfig {
            conf: check_ratio(o.conf_floor.unwrap_or(0.001), "conf-floor")?,
            iou: check_ratio(o.iou.unwrap_or(DEFAULT_IOU), "iou")?,
            ..PostConfig::default()
        };
        let refs: Vec<&Sample> = samples.iter().collect();
        detect_all(&mut model, &refs, &post, 16)?
    } else {
        images_from_detections(o.detections.as_deref().unwrap_or(Path::new("")), &ids, &samples)?
    };
    let report = evaluate(&images, NUM_CLASSES, conf);
    write_json(&out.join("metrics.json"), &report)?;
    fs::write(out.join("pr.csv"), pr_csv(&images, NUM_CLASSES))?;
    print_json(&serde_json::json!({
        "images": report.images,
        "map50": report.map50,
        "map5095": report.map5095,
        "precision": report.precision,
        "recall": report.recall,
    }));
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneOpts {
    /// Trained weights to prune.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Output directory for weights.rlw and prune_report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fraction of prunable channels to remove [default: 0.3].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Dataset root; when given the pruned model is fine-tuned on its train split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fine-tuning epochs [default: 30].
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn prune(o: PruneOpts) -> CliResult<()> {
    let weights = req(o.weights, "weights")?;
    let out = req(o.out, "out")?;
    let ratio = o.ratio.unwrap_or(0.3);
    if !(ratio.is_finite() && (0.0..1.0).contains(&ratio)) {
        return Err(CliError::usage(format!("--ratio must lie in [0, 1), got {ratio}")));
    }
    need_file(&weights, "weights")?;
    let ds = o.data.as_ref().map(DatasetDir::new);
    if let Some(ds) = &ds {
        need_split(ds, "train")?;
        need_split(ds, "val")?;
    }
    prepare_out(&out)?;
    let mut model = Model::load(&weights)?;
    let report = prune_model(&mut model, ratio)?;
    let epochs = o.finetune_epochs.unwrap_or(FINETUNE_EPOCHS);
    if let (Some(ds), true) = (&ds, epochs > 0) {
        let (_, train_s) = read_split_samples(ds, "train")?;
        let (_, val_s) = read_split_samples(ds, "val")?;
        let tcfg = TrainConfig {
            seed: o.seed.unwrap_or(0),
            batch_size: o.batch_size.unwrap_or(8),
            ..TrainConfig::default()
        };
        let train_refs: Vec<&Sample> = train_s.iter().collect();
        let val_refs: Vec<&Sample> = val_s.iter().collect();
        let log = finetune(&mut model, &train_refs, &val_refs, epochs, &tcfg)?;
        fs::write(out.join("finetune_log.csv"), log.to_csv())?;
    }
    let path = out.join("weights.rlw");
    model.save(&path)?;
    write_json(&out.join("prune_report.json"), &report)?;
    print_json(&serde_json::json!({
        "weights": path,
        "channels_removed": report.channels_removed,
        "ratio_achieved": report.ratio_achieved,
        "params_before": report.params_before,
        "params_after": report.params_after,
    }));
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferOpts {
    /// Model weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// An image, a directory of images, or a dataset root.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory for detections.txt and annotated/.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 0.4]
    #[arg(long)]
    pub conf: Option<f64>,
    /// [default: 0.45]
    #[arg(long)]
    pub iou: Option<f64>,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("png"))
}

fn collect_images(input: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_file() {
        return Ok(vec![(stem(input), input.to_path_buf())]);
    }
    if !input.is_dir() {
        return Err(CliError::data(format!("input {} does not exist", input.display())));
    }
    let dir = if input.join("images").is_dir() {
        input.join("images")
    } else {
        input.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!("no .ppm or .png images in {}", dir.display())));
    }
    Ok(files.into_iter().map(|p| (stem(&p), p)).collect())
}

pub fn infer(o: InferOpts) -> CliResult<()> {
    let weights = req(o.weights, "weights")?;
    let input = req(o.input, "input")?;
    let out = req(o.out, "out")?;
    let post = PostConfig {
        conf: check_ratio(o.conf.unwrap_or(DEFAULT_CONF), "conf")?,
        iou: check_ratio(o.iou.unwrap_or(DEFAULT_IOU), "iou")?,
        ..PostConfig::default()
    };
    need_file(&weights, "weights")?;
    let files = collect_images(&input)?;
    prepare_out(&out)?;
    let annotated = out.join("annotated");
    fs::create_dir_all(&annotated)?;
    let mut model = Model::load(&weights)?;
    let size = model.config.input_size;
    let mut text = String::new();
    let mut count = 0;
    for chunk in files.chunks(8) {
        let samples = chunk
            .iter()
            .map(|(_, p)| {
                Image::read(p).map(|image| Sample {
                    image,
                    annotations: vec![],
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Sample> = samples.iter().collect();
        let raw = model.predict(ripeloc_core::data::batch_tensor(&refs, size)?)?;
        for (b, ((id, _), s)) in chunk.iter().zip(&samples).enumerate() {
            let dets = postprocess(&raw, b, &post, size as f64);
            count += dets.len();
            text.push_str(&format_detections(id, &dets));
            let marks: Vec<Mark> = dets
                .iter()
                .map(|d| Mark {
                    class_id: d.class_id,
                    bbox: d.bbox,
                    center: d.center,
                })
                .collect();
            annotate(&s.image, &marks).write_ppm(&annotated.join(format!("{id}.ppm")))?;
        }
    }
    fs::write(out.join("detections.txt"), &text)?;
    print_json(&serde_json::json!({"images": files.len(), "detections": count}));
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsOpts {
    /// Width multiple [default: 0.25].
    #[arg(long)]
    pub width: Option<f64>,
    /// Input side [default: 640].
    #[arg(long)]
    pub image_size: Option<usize>,
    /// [default: lightweight]
    #[arg(long, value_enum)]
    pub neck: Option<Neck>,
    /// [default: compact]
    #[arg(long, value_enum)]
    pub head: Option<Head>,
    /// Count an existing (e.g. pruned) model instead of a fresh one.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Also list every counted unit.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub layers: bool,
    /// Emit JSON instead of a text table.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub json: bool,
}

pub fn flops(o: FlopsOpts) -> CliResult<()> {
    let model = match &o.weights {
        Some(w) => {
            need_file(w, "weights")?;
            Model::load(w)?
        }
        None => {
            let mut cfg = ModelConfig::new(o.width.unwrap_or(0.25), NUM_CLASSES, 640);
            cfg.neck = match o.neck.unwrap_or(Neck::Lightweight) {
                Neck::Lightweight => NeckKind::Lightweight,
                Neck::Dense => NeckKind::Dense,
            };
            cfg.head = match o.head.unwrap_or(Head::Compact) {
                Head::Compact => HeadKind::Compact,
                Head::Decoupled => HeadKind::Decoupled,
            };
            build_model(&cfg, 0)?
        }
    };
    let size = o.image_size.unwrap_or(640);
    if size == 0 || size % 32 != 0 {
        return Err(CliError::usage("--image-size must be a positive multiple of 32"));
    }
    let table = model.flop_table(size);
    let groups: Vec<(Group, &str)> = vec![(Group::Backbone, "backbone"), (Group::Neck, "neck"), (Group::Head, "head")];
    let rows: Vec<(&str, usize, usize)> = groups
        .iter()
        .map(|&(g, n)| (n, model.group_params(g), model.group_flops(size, g)))
        .collect();
    let (params, total) = (model.count_params(), model.count_flops(size));
    if o.json {
        let units: Vec<_> = table
            .iter()
            .map(|e| serde_json::json!({"layer": e.layer, "group": e.group, "name": e.name, "flops": 2 * e.macs}))
            .collect();
        let mut v = serde_json::json!({
            "width": model.config.width,
            "input_size": size,
            "groups": rows.iter().map(|r| serde_json::json!({"group": r.0, "params": r.1, "flops": r.2})).collect::<Vec<_>>(),
            "total_params": params,
            "total_flops": total,
        });
        if o.layers {
            v["units"] = serde_json::Value::Array(units);
        }
        print_json(&v);
        return Ok(());
    }
    println!("width {} input {size}x{size}", model.config.width);
    println!("{:<10} {:>12} {:>10}", "group", "params", "GFLOPs");
    for (n, p, f) in &rows {
        println!("{n:<10} {p:>12} {:>10.3}", *f as f64 / 1e9);
    }
    println!("{:<10} {params:>12} {:>10.3}", "total", total as f64 / 1e9);
    if o.layers {
        println!();
        println!("{:<5} {:<9} {:<40} {:>12}", "layer", "group", "unit", "MFLOPs");
        for e in &table {
            let g = groups.iter().find(|x| x.0 == e.group).map_or("", |x| x.1);
            println!("{:<5} {g:<9} {:<40} {:>12.3}", e.layer, e.name, 2.0 * e.macs as f64 / 1e6);
        }
    }
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugpreviewOpts {
    /// Dataset root to draw samples from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; written as a dataset with a `preview` split plus annotated/.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: train]
    #[arg(long)]
    pub split: Option<String>,
    /// Number of augmented samples [default: 8].
    #[arg(long)]
    pub count: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Transform set [default: heavy].
    #[arg(long, value_enum)]
    pub strength: Option<Strength>,
    /// Colour-jitter gains [default: greenhouse].
    #[arg(long, value_enum)]
    pub hsv: Option<HsvPreset>,
    /// Full augmentation settings (config file only).
    #[arg(skip)]
    pub aug: Option<AugConfig>,
}

pub fn augpreview(o: AugpreviewOpts) -> CliResult<()> {
    let data = req(o.data, "data")?;
    let out = req(o.out, "out")?;
    let split = o.split.unwrap_or_else(|| "train".into());
    let ds = DatasetDir::new(&data);
    need_split(&ds, &split)?;
    let mut cfg = o.aug.unwrap_or_else(AugConfig::greenhouse);
    if let Some(h) = o.hsv {
        apply_hsv(&mut cfg, h);
    }
    let cfg = cfg.with_strength(o.strength.unwrap_or(Strength::Heavy).into());
    cfg.validate()?;
    prepare_out(&out)?;
    let (_, samples) = read_split_samples(&ds, &split)?;
    if samples.is_empty() {
        return Err(CliError::data(format!("{split} split is empty")));
    }
    let pool: Vec<&Sample> = samples.iter().collect();
    let dst = DatasetDir::new(&out);
    let annotated = out.join("annotated");
    fs::create_dir_all(&annotated)?;
    let seed = o.seed.unwrap_or(0);
    let mut ids = Vec::new();
    for i in 0..o.count.unwrap_or(8) {
        let s = augment(&pool, i % pool.len(), &cfg, &mut stream(seed, i as u64))?;
        let id = format!("aug_{i:04}");
        dst.write_sample(&id, &s)?;
        let marks: Vec<Mark> = s
            .ground_truth()
            .into_iter()
            .map(|g| Mark {
                class_id: g.class_id,
                bbox: g.bbox,
                center: g.center,
            })
            .collect();
        annotate(&s.image, &marks).write_ppm(&annotated.join(format!("{id}.ppm")))?;
        ids.push(id);
    }
    dst.write_manifest("preview", &ids)?;
    print_json(&serde_json::json!({"samples": ids.len(), "enabled": cfg.enabled()}));
    Ok(())
}
