//! BatchNorm-γ structured channel pruning.
//!
//! A prunable group is the output of one Conv-BN unit together with every
//! tensor slice that has to follow its channels: depthwise pass-throughs,
//! consumer input columns (with concat offsets), RAAM gates. Outputs that
//! enter a C3k2 or C2PSA split are never grouped.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ripeloc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::augment::AugStrength;
use crate::blocks::{ConvUnit, Spatial};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Block, Model};
use crate::params::ParamId;
use crate::trainer::{train, PhaseConfig, TrainConfig, TrainLog};

/// Fewest channels a group may keep.
pub const MIN_CHANNELS: usize = 4;
pub const FINETUNE_LR: f64 = 0.0003;
pub const FINETUNE_EPOCHS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Out,
    In,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slice {
    tensor: ParamId,
    axis: Axis,
    offset: usize,
}

#[derive(Clone, Debug)]
pub struct Group {
    pub name: String,
    pub layer: usize,
    pub gamma: ParamId,
    pub width: usize,
    slices: Vec<Slice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedChannel {
    pub group: usize,
    pub layer: usize,
    pub channel: usize,
    pub gamma_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub layer: usize,
    pub width_before: usize,
    pub kept: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub groups: Vec<GroupReport>,
    pub params_before: usize,
    pub params_after: usize,
    pub channels_before: usize,
    pub channels_removed: usize,
    pub ratio_requested: f64,
    pub ratio_achieved: f64,
    /// Groups where the channel floor stopped further removal.
    pub floored: Vec<String>,
}

impl PruneReport {
    pub fn params_ratio(&self) -> f64 {
        self.params_after as f64 / self.params_before as f64
    }
}

fn out_slices(u: &ConvUnit, out: &mut Vec<Slice>) {
    let mut push = |tensor| {
        out.push(Slice {
            tensor,
            axis: Axis::Out,
            offset: 0,
        })
    };
    push(u.weight);
    if let Some(b) = u.bias {
        push(b);
    }
    if let Some(bn) = &u.bn {
        for t in [bn.gamma, bn.beta, bn.mean, bn.var] {
            push(t);
        }
    }
}

fn in_col(u: &ConvUnit, offset: usize) -> Slice {
    Slice {
        tensor: u.weight,
        axis: Axis::In,
        offset,
    }
}

fn row(tensor: ParamId, offset: usize) -> Slice {
    Slice {
        tensor,
        axis: Axis::Out,
        offset,
    }
}

/// Slices for a spatial stage reading the channels at `offset`.
fn spatial_in(sp: &Spatial, offset: usize, out: &mut Vec<Slice>) {
    match sp {
        Spatial::Dense(u) => out.push(in_col(u, offset)),
        Spatial::Separable(ds) => {
            out.push(row(ds.dw.weight, offset));
            out.extend(ds.dw.bias.map(|b| row(b, offset)));
            out.push(in_col(&ds.pw, offset));
        }
    }
}

fn last_unit(sp: &Spatial) -> &ConvUnit {
    match sp {
        Spatial::Dense(u) => u,
        Spatial::Separable(ds) => &ds.pw,
    }
}

struct Graph<'a> {
    model: &'a Model,
    consumers: Vec<Vec<(usize, usize)>>,
}

impl<'a> Graph<'a> {
    fn new(model: &'a Model) -> Self {
        let mut consumers = vec![Vec::new(); model.layers.len()];
        for l in &model.layers {
            for (pos, &src) in l.inputs.iter().enumerate() {
                consumers[src].push((l.index, pos));
            }
        }
        Self { model, consumers }
    }

    /// Slices in every consumer of layer `l`'s output channels starting at
    /// `offset`; `false` when some consumer cannot follow a removal.
    fn downstream(&self, l: usize, offset: usize, out: &mut Vec<Slice>) -> bool {
        let layers = &self.model.layers;
        if self.consumers[l].is_empty() {
            return false;
        }
        for &(c, pos) in &self.consumers[l] {
            let cl = &layers[c];
            let off = offset + cl.inputs[..pos].iter().map(|&j| layers[j].c_out).sum::<usize>();
            let ok = match &cl.block {
                Block::Conv(u) | Block::DenseFuse(u) => {
                    out.push(in_col(u, off));
                    true
                }
                Block::Ghost(g) => {
                    out.push(in_col(&g.primary, off));
                    true
                }
                Block::Down(sp) => {
                    spatial_in(sp, off, out);
                    true
                }
                Block::SppfPsa(sp, _) => {
                    out.push(in_col(&sp.reduce, off));
                    true
                }
                Block::Upsample => self.downstream(c, off, out),
                Block::Raam(r) => {
                    out.push(in_col(&r.fc1, off));
                    out.push(row(r.fc2.weight, off));
                    out.extend(r.fc2.bias.map(|b| row(b, off)));
                    out.push(row(r.beta, off));
                    self.downstream(c, off, out)
                }
                Block::Detect(heads) => {
                    // Scale inputs are separate maps, not a concat.
                    let h = &heads[pos];
                    match &h.proj {
                        Some(p) => out.push(in_col(p, offset)),
                        None => {
                            for chain in [&h.cls, &h.reg] {
                                if let Some(first) = chain.first() {
                                    spatial_in(first, offset, out);
                                }
                            }
                            if h.cls.is_empty() {
                                out.push(in_col(&h.cls_out, offset));
                            }
                            if h.reg.is_empty() {
                                out.push(in_col(&h.reg_out, offset));
                            }
                        }
                    }
                    true
                }
                Block::C3k2(_) => false,
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

/// Enumerates every prunable group in layer order.
pub fn prunable_groups(model: &Model) -> Vec<Group> {
    let g = Graph::new(model);
    let st = &model.store;
    let mut groups = Vec::new();
    let mut seen: HashSet<ParamId> = HashSet::new();
    let mut add = |groups: &mut Vec<Group>, name: String, layer: usize, producer: &ConvUnit, mut extra: Vec<Slice>| {
        let Some(bn) = &producer.bn else { return };
        if !seen.insert(bn.gamma) {
            return;
        }
        let mut slices = Vec::new();
        out_slices(producer, &mut slices);
        slices.append(&mut extra);
        groups.push(Group {
            name,
            layer,
            gamma: bn.gamma,
            width: producer.out_channels(st),
            slices,
        });
    };
    for l in &model.layers {
        let i = l.index;
        let name = |s: &str| format!("model.{i}.{s}");
        match &l.block {
            Block::Conv(u) | Block::DenseFuse(u) => {
                let mut s = Vec::new();
                if g.downstream(i, 0, &mut s) {
                    add(&mut groups, name("out"), i, u, s);
                }
            }
            Block::Down(sp) => {
                let mut s = Vec::new();
                if g.downstream(i, 0, &mut s) {
                    add(&mut groups, name("out"), i, last_unit(sp), s);
                }
            }
            Block::C3k2(c) => {
                for (k, b) in c.bottlenecks.iter().enumerate() {
                    let mut s = Vec::new();
                    spatial_in(&b.b, 0, &mut s);
                    add(&mut groups, name(&format!("m{k}")), i, last_unit(&b.a), s);
                }
                let mut s = Vec::new();
                if g.downstream(i, 0, &mut s) {
                    add(&mut groups, name("out"), i, &c.proj, s);
                }
            }
            Block::SppfPsa(sp, psa) => {
                let r = sp.reduce.out_channels(st);
                let s = (0..4).map(|j| in_col(&sp.proj, j * r)).collect();
                add(&mut groups, name("sppf"), i, &sp.reduce, s);
                add(&mut groups, name("ffn"), i, &psa.ffn1, vec![in_col(&psa.ffn2, 0)]);
                let mut s = Vec::new();
                if g.downstream(i, 0, &mut s) {
                    add(&mut groups, name("out"), i, &psa.cv2, s);
                }
            }
            Block::Ghost(gh) => {
                let p = gh.primary.out_channels(st);
                let mut s = vec![row(gh.cheap.weight, 0)];
                s.extend(gh.cheap.bias.map(|b| row(b, 0)));
                if g.downstream(i, 0, &mut s) && g.downstream(i, p, &mut s) {
                    add(&mut groups, name("out"), i, &gh.primary, s);
                }
            }
            Block::Detect(heads) => {
                for (k, h) in heads.iter().enumerate() {
                    for (tag, chain, out) in [("cls", &h.cls, &h.cls_out), ("reg", &h.reg, &h.reg_out)] {
                        for (j, stage) in chain.iter().enumerate() {
                            let mut s = Vec::new();
                            match chain.get(j + 1) {
                                Some(next) => spatial_in(next, 0, &mut s),
                                None => s.push(in_col(out, 0)),
                            }
                            add(&mut groups, name(&format!("{tag}{k}.{j}")), i, last_unit(stage), s);
                        }
                    }
                }
            }
            Block::Upsample | Block::Raam(_) => {}
        }
    }
    groups
}

/// Every prunable channel, ascending by `|γ|`, ties by layer then group
/// then channel.
pub fn rank_channels(model: &Model) -> Vec<RankedChannel> {
    rank_groups(model, &prunable_groups(model))
}

fn rank_groups(model: &Model, groups: &[Group]) -> Vec<RankedChannel> {
    let mut v: Vec<RankedChannel> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| {
            model.store.get(g.gamma).data().iter().enumerate().map(move |(c, &y)| RankedChannel {
                group: gi,
                layer: g.layer,
                channel: c,
                gamma_abs: y.abs(),
            })
        })
        .collect();
    v.sort_by(|a, b| {
        a.gamma_abs
            .total_cmp(&b.gamma_abs)
            .then(a.layer.cmp(&b.layer))
            .then(a.group.cmp(&b.group))
            .then(a.channel.cmp(&b.channel))
    });
    v
}

fn remove_indices(t: &Tensor, axis: Axis, drop: &BTreeSet<usize>) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    let ax = match axis {
        Axis::Out => 0,
        Axis::In => 1,
    };
    if ax >= shape.len() {
        return Err(Error::Config(format!("cannot slice axis {ax} of a rank-{} tensor", shape.len())));
    }
    let outer: usize = shape[..ax].iter().product();
    let inner: usize = shape[ax + 1..].iter().product();
    let n = shape[ax];
    if let Some(&bad) = drop.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("channel {bad} out of range for extent {n}")));
    }
    let mut data = Vec::with_capacity(outer * (n - drop.len()) * inner);
    for o in 0..outer {
        for i in (0..n).filter(|i| !drop.contains(i)) {
            let start = (o * n + i) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape;
    new_shape[ax] = n - drop.len();
    Ok(Tensor::new(&new_shape, data)?)
}

/// Removes the given `(group, channel)` pairs. Groups refer to
/// [`prunable_groups`] of the model as passed in.
pub fn prune_selected(model: &mut Model, remove: &[(usize, usize)]) -> Result<Vec<GroupReport>> {
    let groups = prunable_groups(model);
    let mut per_group: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); groups.len()];
    for &(g, c) in remove {
        let grp = groups
            .get(g)
            .ok_or_else(|| Error::Config(format!("no prunable group {g}")))?;
        if c >= grp.width {
            return Err(Error::Config(format!("{} has no channel {c}", grp.name)));
        }
        per_group[g].insert(c);
    }
    for (g, set) in groups.iter().zip(&per_group) {
        if g.width - set.len() < MIN_CHANNELS.min(g.width) {
            return Err(Error::Config(format!(
                "{} would keep {} channels, below the floor of {MIN_CHANNELS}",
                g.name,
                g.width - set.len()
            )));
        }
    }
    let mut edits: BTreeMap<(ParamId, u8), BTreeSet<usize>> = BTreeMap::new();
    for (g, set) in groups.iter().zip(&per_group) {
        for s in &g.slices {
            let key = (s.tensor, (s.axis == Axis::In) as u8);
            edits.entry(key).or_default().extend(set.iter().map(|c| s.offset + c));
        }
    }
    for ((id, ax), drop) in edits {
        if drop.is_empty() {
            continue;
        }
        let axis = if ax == 1 { Axis::In } else { Axis::Out };
        let t = remove_indices(model.store.get(id), axis, &drop)?;
        *model.store.get_mut(id) = t;
    }
    model.refresh_channels();
    model.check_structure()?;
    Ok(groups
        .iter()
        .zip(&per_group)
        .map(|(g, set)| GroupReport {
            name: g.name.clone(),
            layer: g.layer,
            width_before: g.width,
            kept: (0..g.width).filter(|c| !set.contains(c)).collect(),
        })
        .collect())
}

/// Removes the globally lowest-`|γ|` fraction `ratio` of prunable channels,
/// never leaving a group with fewer than [`MIN_CHANNELS`].
pub fn prune(model: &mut Model, ratio: f64) -> Result<PruneReport> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio must lie in [0, 1), got {ratio}")));
    }
    let groups = prunable_groups(model);
    let ranked = rank_groups(model, &groups);
    let total = ranked.len();
    let target = (ratio * total as f64).round() as usize;
    let mut left: Vec<usize> = groups.iter().map(|g| g.width).collect();
    let mut floored = BTreeSet::new();
    let mut remove = Vec::with_capacity(target);
    for r in &ranked {
        if remove.len() == target {
            break;
        }
        if left[r.group] <= MIN_CHANNELS.min(groups[r.group].width) {
            floored.insert(r.group);
            continue;
        }
        left[r.group] -= 1;
        remove.push((r.group, r.channel));
    }
    let params_before = model.count_params();
    let reports = prune_selected(model, &remove)?;
    Ok(PruneReport {
        groups: reports,
        params_before,
        params_after: model.count_params(),
        channels_before: total,
        channels_removed: remove.len(),
        ratio_requested: ratio,
        ratio_achieved: if total == 0 { 0.0 } else { remove.len() as f64 / total as f64 },
        floored: floored.into_iter().map(|g| groups[g].name.clone()).collect(),
    })
}

/// Light-augmentation retraining of a pruned model at the fine-tuning rate.
pub fn finetune(
    model: &mut Model,
    train_set: &[&Sample],
    val_set: &[&Sample],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let plan = [PhaseConfig {
        frozen: vec![],
        lr0: FINETUNE_LR,
        epochs,
        aug: AugStrength::Light,
    }];
    train(model, train_set, val_set, &plan, cfg, None)
}
