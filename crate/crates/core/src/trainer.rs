//! SGD with momentum, cosine learning-rate annealing, layer freezing and the
//! progressive-unfreezing phase plan.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use ripeloc_tensor::{Mode, Tape};
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugConfig, AugStrength};
use crate::data::{batch_tensor, stream, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ImageEval, MetricsReport};
use crate::loss::{total_loss, LossConfig};
use crate::model::{build_model, Model, ModelConfig, BACKBONE_LAYERS};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::postprocess::{postprocess, PostConfig};
use crate::synth::{generate_indexed, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub frozen: Vec<usize>,
    pub lr0: f64,
    pub epochs: usize,
    pub aug: AugStrength,
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("phase epochs must be positive".into()));
        }
        if let Some(bad) = self.frozen.iter().find(|&&i| i >= BACKBONE_LAYERS) {
            return Err(Error::Config(format!("frozen layer {bad} is outside the backbone")));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("phase lr0 must be positive".into()));
        }
        Ok(())
    }
}

fn scaled(epochs: usize, factor: f64) -> usize {
    ((epochs as f64 * factor).round() as usize).max(1)
}

/// Progressive unfreezing: whole backbone frozen, then layers 0–4, then
/// nothing, with heavy, moderate and light augmentation. Epoch counts are
/// multiplied by `epoch_scale`.
pub fn make_phase_plan(epoch_scale: f64) -> Vec<PhaseConfig> {
    vec![
        PhaseConfig {
            frozen: (0..BACKBONE_LAYERS).collect(),
            lr0: 0.002,
            epochs: scaled(50, epoch_scale),
            aug: AugStrength::Heavy,
        },
        PhaseConfig {
            frozen: (0..5).collect(),
            lr0: 0.001,
            epochs: scaled(80, epoch_scale),
            aug: AugStrength::Moderate,
        },
        PhaseConfig {
            frozen: vec![],
            lr0: 0.0003,
            epochs: scaled(120, epoch_scale),
            aug: AugStrength::Light,
        },
    ]
}

/// Single unfrozen phase at lr0 0.01 for 300 epochs (scaled).
pub fn baseline_plan(epoch_scale: f64) -> Vec<PhaseConfig> {
    vec![PhaseConfig {
        frozen: vec![],
        lr0: 0.01,
        epochs: scaled(300, epoch_scale),
        aug: AugStrength::Heavy,
    }]
}

/// The baseline recipe with the whole backbone frozen throughout.
pub fn frozen_plan(epoch_scale: f64) -> Vec<PhaseConfig> {
    vec![PhaseConfig {
        frozen: (0..BACKBONE_LAYERS).collect(),
        ..baseline_plan(epoch_scale).remove(0)
    }]
}

/// `lrf + (lr0 − lrf)·(1 + cos(π·epoch/total))/2`; `epoch` may be fractional.
pub fn cosine_lr(lr0: f64, lrf: f64, epoch: f64, total: f64) -> f64 {
    if epoch <= 0.0 {
        return lr0;
    }
    if epoch >= total {
        return lrf;
    }
    lrf + (lr0 - lrf) * (1.0 + (std::f64::consts::PI * epoch / total).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.937,
            weight_decay: 0.0005,
        }
    }
}

/// Momentum buffers (one per stored tensor, allocated on first update),
/// global step and the rate of the last step.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub velocity: Vec<Option<Vec<f64>>>,
    pub step: u64,
    pub lr: f64,
    pub nan_incidents: usize,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            velocity: vec![None; store.len()],
            ..Self::default()
        }
    }
}

/// `v ← μ·v + g + wd·p; p ← p − lr·v` for every `(id, grad)` pair whose
/// tensor is a trainable weight. A non-finite gradient aborts the whole
/// step, leaving parameters and buffers untouched, and returns `false`.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Vec<f64>)],
    state: &mut OptimState,
    lr: f64,
    cfg: &SgdConfig,
    frozen_layers: &[bool],
) -> bool {
    if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        state.nan_incidents += 1;
        return false;
    }
    if state.velocity.len() < store.len() {
        state.velocity.resize(store.len(), None);
    }
    for (id, g) in grads {
        let e = store.entry(*id);
        if e.kind != ParamKind::Weight || frozen_layers.get(e.layer).copied().unwrap_or(false) {
            continue;
        }
        let p = store.get_mut(*id);
        let v = state.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
        if v.len() != g.len() {
            *v = vec![0.0; g.len()];
        }
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    state.lr = lr;
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    /// Per-phase final rate as a fraction of the phase's lr0.
    pub lrf_ratio: f64,
    pub aug: AugConfig,
    pub loss: LossConfig,
    /// Validate every this many epochs (and always after the last one);
    /// 0 disables validation.
    pub val_every: usize,
    /// Confidence floor for detections during validation.
    pub val_conf: f64,
    /// Linear learning-rate warm-up at the start of the first phase.
    pub warmup_epochs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seed: 0,
            sgd: SgdConfig::default(),
            lrf_ratio: 0.01,
            aug: AugConfig::greenhouse(),
            loss: LossConfig::default(),
            val_every: 1,
            val_conf: 0.001,
            warmup_epochs: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: usize,
    pub epoch: usize,
    pub lr: f64,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub val_map50: Option<f64>,
    pub val_map5095: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub nan_incidents: usize,
    pub steps: u64,
    /// Trainable scalars at the start of each phase.
    pub trainable: Vec<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,lr,box_loss,cls_loss,dfl_loss,val_map50,val_map5095\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.8},{:.6},{:.6},{:.6},{},{}",
                r.phase,
                r.epoch,
                r.lr,
                r.box_loss,
                r.cls_loss,
                r.dfl_loss,
                opt(r.val_map50),
                opt(r.val_map5095)
            );
        }
        s
    }
}

/// Runs the model over `samples` in eval mode and pairs detections with
/// ground truth for the metrics.
pub fn detect_all(model: &mut Model, samples: &[&Sample], post: &PostConfig, batch: usize) -> Result<Vec<ImageEval>> {
    let size = model.config.input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = batch_tensor(chunk, size)?;
        let raw = model.predict(x)?;
        for (b, s) in chunk.iter().enumerate() {
            let dets = postprocess(&raw, b, post, size as f64);
            out.push(ImageEval {
                dets,
                gts: s.ground_truth(),
            });
        }
    }
    Ok(out)
}

/// Full metrics report of `model` on `samples`; AP uses every detection
/// above `conf_floor`, operating-point metrics use `conf`.
pub fn evaluate_model(model: &mut Model, samples: &[&Sample], conf_floor: f64, conf: f64) -> Result<MetricsReport> {
    let post = PostConfig {
        conf: conf_floor,
        ..PostConfig::default()
    };
    let images = detect_all(model, samples, &post, 16)?;
    Ok(evaluate(&images, model.config.num_classes, conf))
}

/// One optimisation step on a prepared batch. Returns `(cls, box, dfl)`
/// loss values, or `None` when the step was aborted on a non-finite value.
pub fn train_step(
    model: &mut Model,
    batch: &[Sample],
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<Option<(f64, f64, f64)>> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let x = batch_tensor(&refs, model.config.input_size)?;
    let gts: Vec<_> = batch.iter().map(|s| s.gt_boxes()).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let heads = model.forward(&mut tape, xv, Mode::Train)?;
    let parts = match total_loss(&mut tape, &heads, &gts, model.config.reg_bins, &cfg.loss) {
        Ok(p) => p,
        Err(Error::Numeric(_)) => {
            state.nan_incidents += 1;
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    tape.backward(parts.total)?;
    let grads: Vec<(ParamId, Vec<f64>)> = heads
        .bindings
        .iter()
        .filter_map(|(id, v)| tape.grad(*v).map(|g| (*id, g.to_vec())))
        .collect();
    let frozen = model.frozen_mask();
    if !sgd_step(&mut model.store, &grads, state, lr, &cfg.sgd, &frozen) {
        return Ok(None);
    }
    Ok(Some((parts.cls, parts.box_, parts.dfl)))
}

/// Called after every epoch with the new log row.
pub type EpochHook<'a> = dyn FnMut(&LogRow) + 'a;

/// Trains through `plan` on `train`, validating on `val`.
pub fn train(
    model: &mut Model,
    train_set: &[&Sample],
    val_set: &[&Sample],
    plan: &[PhaseConfig],
    cfg: &TrainConfig,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainLog> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2 for BatchNorm".into()));
    }
    cfg.aug.validate()?;
    for p in plan {
        p.validate()?;
    }
    let mut state = OptimState::new(&model.store);
    let mut log = TrainLog::default();
    let n = train_set.len();
    // A trailing batch of one would break BatchNorm; fold it into the last.
    let mut bounds: Vec<(usize, usize)> = (0..n).step_by(cfg.batch_size).map(|s| (s, (s + cfg.batch_size).min(n))).collect();
    if bounds.len() > 1 && bounds.last().is_some_and(|b| b.1 - b.0 < 2) {
        let last = bounds.pop().unwrap_or_default();
        if let Some(prev) = bounds.last_mut() {
            prev.1 = last.1;
        }
    }
    let steps_per_epoch = bounds.len() as f64;
    let mut sample_counter: u64 = 0;
    for (pi, phase) in plan.iter().enumerate() {
        model.set_frozen(&phase.frozen)?;
        log.trainable.push(model.trainable_params());
        let aug = cfg.aug.with_strength(phase.aug);
        let lrf = phase.lr0 * cfg.lrf_ratio;
        for epoch in 0..phase.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(cfg.seed, ((pi as u64) << 32) | epoch as u64));
            let (mut sc, mut sb, mut sd, mut count) = (0.0, 0.0, 0.0, 0usize);
            let mut lr = phase.lr0;
            for (bi, &(lo, hi)) in bounds.iter().enumerate() {
                let batch = order[lo..hi]
                    .iter()
                    .map(|&i| {
                        sample_counter += 1;
                        augment(train_set, i, &aug, &mut stream(cfg.seed ^ 0x5eed_a06, sample_counter))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let t = epoch as f64 + bi as f64 / steps_per_epoch;
                lr = cosine_lr(phase.lr0, lrf, t, phase.epochs as f64);
                if pi == 0 && t < cfg.warmup_epochs {
                    lr *= (t + 1.0 / steps_per_epoch) / cfg.warmup_epochs;
                }
                if let Some((c, b, d)) = train_step(model, &batch, &mut state, lr, cfg)? {
                    sc += c;
                    sb += b;
                    sd += d;
                    count += 1;
                }
            }
            let validate = cfg.val_every > 0 && !val_set.is_empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == phase.epochs);
            let (m50, m5095) = if validate {
                let rep = evaluate_model(model, val_set, cfg.val_conf, crate::postprocess::DEFAULT_CONF)?;
                (Some(rep.map50), Some(rep.map5095))
            } else {
                (None, None)
            };
            let k = count.max(1) as f64;
            let row = LogRow {
                phase: pi + 1,
                epoch: epoch + 1,
                lr,
                box_loss: sb / k,
                cls_loss: sc / k,
                dfl_loss: sd / k,
                val_map50: m50,
                val_map5095: m5095,
            };
            if let Some(h) = hook.as_mut() {
                h(&row);
            }
            log.rows.push(row);
        }
    }
    log.nan_incidents = state.nan_incidents;
    log.steps = state.step;
    if log.steps == 0 {
        return Err(Error::Numeric("every training step hit a non-finite loss".into()));
    }
    Ok(log)
}

/// Class-agnostic synthetic pre-task standing in for large-scale
/// pretraining: fruit of any hue, one "object" class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub images: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            images: 600,
            epochs: 12,
            lr0: 0.01,
            seed: 0x9e37,
            batch_size: 8,
        }
    }
}

pub fn pretext_spec(base: &SceneSpec) -> SceneSpec {
    SceneSpec {
        fruit_hue: Some((0.0, 360.0)),
        ..base.clone()
    }
}

/// Pre-task samples: every fruit relabelled as class 0, no picking points.
pub fn pretext_samples(base: &SceneSpec, images: usize, seed: u64) -> Result<Vec<Sample>> {
    let spec = pretext_spec(base);
    (0..images as u64)
        .map(|i| {
            let mut s = generate_indexed(&spec, seed, i)?.sample;
            for a in &mut s.annotations {
                a.class_id = 0;
                a.center = None;
            }
            Ok(s)
        })
        .collect()
}

/// Trains a one-class model of the same topology on the pre-task.
pub fn pretrain(model_cfg: &ModelConfig, scene: &SceneSpec, cfg: &PretrainConfig) -> Result<(Model, TrainLog)> {
    let pcfg = ModelConfig {
        num_classes: 1,
        ..model_cfg.clone()
    };
    let mut model = build_model(&pcfg, cfg.seed)?;
    let data = pretext_samples(scene, cfg.images, cfg.seed)?;
    let refs: Vec<&Sample> = data.iter().collect();
    let plan = [PhaseConfig {
        frozen: vec![],
        lr0: cfg.lr0,
        epochs: cfg.epochs,
        aug: AugStrength::Heavy,
    }];
    let tcfg = TrainConfig {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        val_every: 0,
        warmup_epochs: 1.0,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &refs, &[], &plan, &tcfg, None)?;
    Ok((model, log))
}

/// Copies every tensor whose name and shape match from `src` into `dst`;
/// the rest (e.g. a classifier with a different class count) keeps its
/// fresh initialisation. Returns the number of tensors copied.
pub fn transfer_weights(src: &Model, dst: &mut Model) -> usize {
    let index = src.store.name_index();
    let ids: Vec<ParamId> = dst.store.ids().collect();
    let mut copied = 0;
    for id in ids {
        let name = &dst.store.entry(id).name;
        if let Some(&sid) = index.get(name) {
            let t = src.store.get(sid);
            if t.shape() == dst.store.get(id).shape() {
                *dst.store.get_mut(id) = t.clone();
                copied += 1;
            }
        }
    }
    copied
}
