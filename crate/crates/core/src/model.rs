//! Backbone + lightweight neck + compact detection head, assembled as an
//! ordered list of layer records.
//!
//! Layer map (indices are stable and drive freezing):
//!
//! | idx | block                  | inputs   |
//! |-----|------------------------|----------|
//! | 0   | Conv s2 (stem)         | image    |
//! | 1   | Conv s2                | 0        |
//! | 2   | C3k2                   | 1        |
//! | 3   | Conv s2                | 2        |
//! | 4   | C3k2 (P3)              | 3        |
//! | 5   | Conv s2                | 4        |
//! | 6   | C3k2 (P4)              | 5        |
//! | 7   | Conv s2                | 6        |
//! | 8   | C3k2                   | 7        |
//! | 9   | SPPF + C2PSA (P5)      | 8        |
//! | 10  | Upsample               | 9        |
//! | 11  | Ghost fuse             | 10, 6    |
//! | 12  | DW-C3k2                | 11       |
//! | 13  | Upsample               | 12       |
//! | 14  | Ghost fuse             | 13, 4    |
//! | 15  | DW-C3k2                | 14       |
//! | 16  | RAAM (out P3)          | 15       |
//! | 17  | DSConv s2              | 16       |
//! | 18  | Ghost fuse             | 17, 12   |
//! | 19  | DW-C3k2                | 18       |
//! | 20  | RAAM (out P4)          | 19       |
//! | 21  | DSConv s2              | 20       |
//! | 22  | Ghost fuse             | 21, 9    |
//! | 23  | DW-C3k2 (out P5)       | 22       |
//! | 24  | Detect                 | 16,20,23 |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ripeloc_tensor::{Mode, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::blocks::{Builder, C2Psa, C3k2, ConvOpts, ConvUnit, Ghost, Raam, Spatial, Sppf};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};

pub const BACKBONE_LAYERS: usize = 10;
pub const DETECT_LAYER: usize = 24;
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const DEFAULT_REG_BINS: usize = 16;
pub const CLS_PRIOR_BIAS: f64 = -4.6;
const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];
const ALLOWED_WIDTHS: [f64; 4] = [0.125, 0.25, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckKind {
    /// Depthwise-separable convs and Ghost fusion.
    Lightweight,
    /// Same topology with dense `3×3` convs and dense `1×1` fusion.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Classification stem shared across scales, per-scale regression.
    Compact,
    /// Independent two-conv classification and regression towers per scale.
    Decoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: f64,
    pub num_classes: usize,
    pub input_size: usize,
    pub neck: NeckKind,
    pub head: HeadKind,
    pub reg_bins: usize,
}

impl ModelConfig {
    pub fn new(width: f64, num_classes: usize, input_size: usize) -> Self {
        Self {
            width,
            num_classes,
            input_size,
            neck: NeckKind::Lightweight,
            head: HeadKind::Compact,
            reg_bins: DEFAULT_REG_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_WIDTHS.iter().any(|w| (w - self.width).abs() < 1e-12) {
            return Err(Error::Config(format!(
                "width multiple {} not in {:?}",
                self.width, ALLOWED_WIDTHS
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("number of classes must be positive".into()));
        }
        if self.reg_bins < 2 {
            return Err(Error::Config("regression needs at least 2 bins".into()));
        }
        Ok(())
    }

    /// Stage widths for stem, stride 4, P3, P4, P5.
    pub fn channels(&self) -> [usize; 5] {
        BASE_CHANNELS.map(|c| ((c as f64 * self.width).round() as usize).max(8))
    }

    /// Common head width all three scales are projected to.
    pub fn head_width(&self) -> usize {
        self.channels()[2]
    }
}

/// Which part of the network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Neck,
    Head,
}

#[derive(Clone, Debug)]
pub struct ScaleHead {
    pub stride: usize,
    pub proj: Option<ConvUnit>,
    pub cls: Vec<Spatial>,
    pub cls_out: ConvUnit,
    pub reg: Vec<Spatial>,
    pub reg_out: ConvUnit,
}

#[derive(Clone, Debug)]
pub enum Block {
    Conv(ConvUnit),
    C3k2(C3k2),
    SppfPsa(Sppf, C2Psa),
    Upsample,
    Ghost(Ghost),
    /// Dense-neck fusion: concat then `1×1` Conv-BN-SiLU.
    DenseFuse(ConvUnit),
    Raam(Raam),
    Down(Spatial),
    Detect(Vec<ScaleHead>),
}

impl Block {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Block::Conv(_) => "Conv",
            Block::C3k2(c) => match c.bottlenecks.first().map(|b| &b.a) {
                Some(Spatial::Separable(_)) => "DW-C3k2",
                _ => "C3k2",
            },
            Block::SppfPsa(..) => "SPPF+C2PSA",
            Block::Upsample => "Upsample",
            Block::Ghost(_) => "Ghost",
            Block::DenseFuse(_) => "DenseFuse",
            Block::Raam(_) => "RAAM",
            Block::Down(Spatial::Separable(_)) => "DSConv",
            Block::Down(Spatial::Dense(_)) => "Conv",
            Block::Detect(_) => "Detect",
        }
    }

    /// Every convolution in the block in execution order.
    pub fn units(&self) -> Vec<&ConvUnit> {
        match self {
            Block::Conv(u) | Block::DenseFuse(u) => vec![u],
            Block::C3k2(c) => c.units(),
            Block::SppfPsa(s, p) => {
                let mut v = vec![&s.reduce, &s.proj];
                v.extend(p.units());
                v
            }
            Block::Upsample => vec![],
            Block::Ghost(g) => vec![&g.primary, &g.cheap],
            Block::Raam(r) => vec![&r.fc1, &r.fc2],
            Block::Down(s) => s.units(),
            Block::Detect(scales) => scales
                .iter()
                .flat_map(|s| {
                    s.proj
                        .iter()
                        .chain(s.cls.iter().flat_map(|c| c.units()))
                        .chain(std::iter::once(&s.cls_out))
                        .chain(s.reg.iter().flat_map(|c| c.units()))
                        .chain(std::iter::once(&s.reg_out))
                        .collect::<Vec<_>>()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub index: usize,
    pub block: Block,
    pub inputs: Vec<usize>,
    pub c_in: usize,
    pub c_out: usize,
    /// Output stride relative to the input image.
    pub stride: usize,
    pub frozen: bool,
}

impl Layer {
    pub fn group(&self) -> Group {
        match self.index {
            i if i < BACKBONE_LAYERS => Group::Backbone,
            DETECT_LAYER => Group::Head,
            _ => Group::Neck,
        }
    }
}

/// Raw head maps at one scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput {
    /// `N × nc × S × S` classification logits.
    pub cls: Var,
    /// `N × 4B × S × S` distance-bin logits, side-major (l, t, r, b).
    pub reg: Var,
    pub stride: usize,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub scales: Vec<ScaleOutput>,
    /// Parameters bound as trainable leaves during this pass.
    pub bindings: Vec<(ParamId, Var)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopEntry {
    pub layer: usize,
    pub group: Group,
    pub name: String,
    pub macs: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layers: Vec<Layer>,
}

struct Assembler<'a> {
    b: Builder<'a, ChaCha8Rng>,
}

impl Assembler<'_> {
    fn at(&mut self, layer: usize) {
        self.b.set_layer(layer, format!("model.{layer}"));
    }
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = {
        let mut a = Assembler {
            b: Builder::new(&mut store, &mut rng, 0, ""),
        };
        assemble(&mut a, config)?
    };
    Ok(Model {
        config: config.clone(),
        store,
        layers,
    })
}

fn assemble(a: &mut Assembler<'_>, cfg: &ModelConfig) -> Result<Vec<Layer>> {
    let [c1, c2, c3, c4, c5] = cfg.channels();
    let sep = cfg.neck == NeckKind::Lightweight;
    let p5_grid = cfg.input_size / 32;
    let mut layers = Vec::with_capacity(DETECT_LAYER + 1);
    let push = |layers: &mut Vec<Layer>, block: Block, inputs: Vec<usize>, c_in, c_out, stride| {
        let index = layers.len();
        layers.push(Layer {
            index,
            block,
            inputs,
            c_in,
            c_out,
            stride,
            frozen: false,
        });
    };
    let s2 = ConvOpts::CBS.stride(2);

    a.at(0);
    push(&mut layers, Block::Conv(a.b.conv("conv", 3, c1, 3, s2)), vec![], 3, c1, 2);
    a.at(1);
    push(&mut layers, Block::Conv(a.b.conv("conv", c1, c2, 3, s2)), vec![0], c1, c2, 4);
    a.at(2);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c2, c2, false)?), vec![1], c2, c2, 4);
    a.at(3);
    push(&mut layers, Block::Conv(a.b.conv("conv", c2, c3, 3, s2)), vec![2], c2, c3, 8);
    a.at(4);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c3, c3, false)?), vec![3], c3, c3, 8);
    a.at(5);
    push(&mut layers, Block::Conv(a.b.conv("conv", c3, c4, 3, s2)), vec![4], c3, c4, 16);
    a.at(6);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c4, c4, false)?), vec![5], c4, c4, 16);
    a.at(7);
    push(&mut layers, Block::Conv(a.b.conv("conv", c4, c5, 3, s2)), vec![6], c4, c5, 32);
    a.at(8);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c5, c5, false)?), vec![7], c5, c5, 32);
    a.at(9);
    let sppf = a.b.sppf("sppf", c5);
    let psa = a.b.c2psa("c2psa", c5, (p5_grid, p5_grid))?;
    push(&mut layers, Block::SppfPsa(sppf, psa), vec![8], c5, c5, 32);

    let fuse = |a: &mut Assembler<'_>, c_in: usize, c_out: usize| -> Result<Block> {
        Ok(if sep {
            Block::Ghost(a.b.ghost("ghost", c_in, c_out)?)
        } else {
            Block::DenseFuse(a.b.conv("fuse", c_in, c_out, 1, ConvOpts::CBS))
        })
    };

    // top-down
    a.at(10);
    push(&mut layers, Block::Upsample, vec![9], c5, c5, 16);
    a.at(11);
    push(&mut layers, fuse(a, c5 + c4, c4)?, vec![10, 6], c5 + c4, c4, 16);
    a.at(12);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c4, c4, sep)?), vec![11], c4, c4, 16);
    a.at(13);
    push(&mut layers, Block::Upsample, vec![12], c4, c4, 8);
    a.at(14);
    push(&mut layers, fuse(a, c4 + c3, c3)?, vec![13, 4], c4 + c3, c3, 8);
    a.at(15);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c3, c3, sep)?), vec![14], c3, c3, 8);
    a.at(16);
    push(&mut layers, Block::Raam(a.b.raam("raam", c3)), vec![15], c3, c3, 8);

    // bottom-up
    a.at(17);
    push(&mut layers, Block::Down(a.b.spatial("down", c3, c3, 2, sep)), vec![16], c3, c3, 16);
    a.at(18);
    push(&mut layers, fuse(a, c3 + c4, c4)?, vec![17, 12], c3 + c4, c4, 16);
    a.at(19);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c4, c4, sep)?), vec![18], c4, c4, 16);
    a.at(20);
    push(&mut layers, Block::Raam(a.b.raam("raam", c4)), vec![19], c4, c4, 16);
    a.at(21);
    push(&mut layers, Block::Down(a.b.spatial("down", c4, c4, 2, sep)), vec![20], c4, c4, 32);
    a.at(22);
    push(&mut layers, fuse(a, c4 + c5, c5)?, vec![21, 9], c4 + c5, c5, 32);
    a.at(23);
    push(&mut layers, Block::C3k2(a.b.c3k2("c3k2", c5, c5, sep)?), vec![22], c5, c5, 32);

    a.at(DETECT_LAYER);
    let head = build_head(a, cfg, [c3, c4, c5])?;
    push(&mut layers, Block::Detect(head), vec![16, 20, 23], c3, cfg.num_classes + 4 * cfg.reg_bins, 8);
    Ok(layers)
}

fn build_head(a: &mut Assembler<'_>, cfg: &ModelConfig, widths: [usize; 3]) -> Result<Vec<ScaleHead>> {
    let ch = cfg.head_width();
    let nc = cfg.num_classes;
    let nreg = 4 * cfg.reg_bins;
    let mut scales = Vec::with_capacity(3);
    match cfg.head {
        HeadKind::Compact => {
            let stem = a.b.ds_conv("cls.stem", ch, ch, 1);
            let cls_out = a.b.conv("cls.out", ch, nc, 1, ConvOpts::LINEAR);
            for (i, (&c, &stride)) in widths.iter().zip(&STRIDES).enumerate() {
                let proj = a.b.conv(&format!("proj{i}"), c, ch, 1, ConvOpts::CBS);
                let reg = vec![
                    a.b.spatial(&format!("reg{i}.0"), ch, ch, 1, false),
                    a.b.spatial(&format!("reg{i}.1"), ch, ch, 1, false),
                ];
                let reg_out = a.b.conv(&format!("reg{i}.out"), ch, nreg, 1, ConvOpts::LINEAR);
                scales.push(ScaleHead {
                    stride,
                    proj: Some(proj),
                    cls: vec![Spatial::Separable(stem.clone())],
                    cls_out: cls_out.clone(),
                    reg,
                    reg_out,
                });
            }
        }
        HeadKind::Decoupled => {
            for (i, (&c, &stride)) in widths.iter().zip(&STRIDES).enumerate() {
                let cls = vec![
                    a.b.spatial(&format!("cls{i}.0"), c, ch, 1, false),
                    a.b.spatial(&format!("cls{i}.1"), ch, ch, 1, false),
                ];
                let cls_out = a.b.conv(&format!("cls{i}.out"), ch, nc, 1, ConvOpts::LINEAR);
                let reg = vec![
                    a.b.spatial(&format!("reg{i}.0"), c, ch, 1, false),
                    a.b.spatial(&format!("reg{i}.1"), ch, ch, 1, false),
                ];
                let reg_out = a.b.conv(&format!("reg{i}.out"), ch, nreg, 1, ConvOpts::LINEAR);
                scales.push(ScaleHead {
                    stride,
                    proj: None,
                    cls,
                    cls_out,
                    reg,
                    reg_out,
                });
            }
        }
    }
    for s in &scales {
        if let Some(b) = s.cls_out.bias {
            a.b.store.get_mut(b).data_mut().fill(CLS_PRIOR_BIAS);
        }
        if let Some(b) = s.reg_out.bias {
            a.b.store.get_mut(b).data_mut().fill(1.0);
        }
    }
    Ok(scales)
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        build_model(config, seed)
    }

    pub fn count_params(&self) -> usize {
        self.store.count_weights()
    }

    pub fn layer_params(&self, layer: usize) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| e.layer == layer && e.kind == crate::params::ParamKind::Weight)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn group_params(&self, group: Group) -> usize {
        self.layers
            .iter()
            .filter(|l| l.group() == group)
            .map(|l| self.layer_params(l.index))
            .sum()
    }

    /// Marks exactly the given backbone layers as frozen.
    pub fn set_frozen(&mut self, frozen: &[usize]) -> Result<()> {
        if let Some(&bad) = frozen.iter().find(|&&i| i >= BACKBONE_LAYERS) {
            return Err(Error::Config(format!("layer {bad} is not a backbone layer")));
        }
        for l in &mut self.layers {
            l.frozen = frozen.contains(&l.index);
        }
        Ok(())
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.frozen).collect()
    }

    /// Trainable scalars given the current freeze flags.
    pub fn trainable_params(&self) -> usize {
        let mask = self.frozen_mask();
        self.store
            .entries()
            .iter()
            .filter(|e| e.kind == crate::params::ParamKind::Weight && !mask[e.layer])
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Recomputes the cached channel counts of every layer from tensor shapes.
    pub fn refresh_channels(&mut self) {
        let mut outs: Vec<usize> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let l = &self.layers[i];
            let c_in = if l.inputs.is_empty() {
                3
            } else {
                l.inputs.iter().map(|&j| outs[j]).sum()
            };
            let c_out = match &l.block {
                Block::Upsample | Block::Raam(_) => c_in,
                Block::Ghost(g) => 2 * g.cheap.out_channels(&self.store),
                Block::Detect(_) => l.c_out,
                b => b.units().last().map(|u| u.out_channels(&self.store)).unwrap_or(c_in),
            };
            outs.push(c_out);
            let l = &mut self.layers[i];
            l.c_in = c_in;
            l.c_out = c_out;
        }
    }

    /// Runs the network on `images` (`N×3×S×S`, values in `[0, 1]`).
    pub fn forward(&mut self, tape: &mut Tape, images: Var, mode: Mode) -> Result<HeadOutputs> {
        let shape = tape.shape(images).to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Data(format!("expected images of shape [N, 3, {s}, {s}], got {shape:?}")));
        }
        let frozen = self.frozen_mask();
        let mut ctx = Ctx::new(tape, &mut self.store, mode, frozen);
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut scales = Vec::new();
        for l in &self.layers {
            ctx.enter_layer(l.index);
            let x = |k: usize| if l.inputs.is_empty() { images } else { outs[l.inputs[k]] };
            let y = match &l.block {
                Block::Conv(u) => u.forward(&mut ctx, x(0))?,
                Block::C3k2(c) => c.forward(&mut ctx, x(0))?,
                Block::SppfPsa(sp, psa) => {
                    let y = sp.forward(&mut ctx, x(0))?;
                    psa.forward(&mut ctx, y)?
                }
                Block::Upsample => ctx.tape.upsample_nearest(x(0), 2)?,
                Block::Ghost(g) => g.forward(&mut ctx, &[x(0), x(1)])?,
                Block::DenseFuse(u) => {
                    let cat = ctx.tape.concat_channels(&[x(0), x(1)])?;
                    u.forward(&mut ctx, cat)?
                }
                Block::Raam(r) => r.forward(&mut ctx, x(0))?,
                Block::Down(sp) => sp.forward(&mut ctx, x(0))?,
                Block::Detect(heads) => {
                    for (k, h) in heads.iter().enumerate() {
                        let mut f = x(k);
                        if let Some(p) = &h.proj {
                            f = p.forward(&mut ctx, f)?;
                        }
                        let mut c = f;
                        for st in &h.cls {
                            c = st.forward(&mut ctx, c)?;
                        }
                        let cls = h.cls_out.forward(&mut ctx, c)?;
                        let mut r = f;
                        for st in &h.reg {
                            r = st.forward(&mut ctx, r)?;
                        }
                        let reg = h.reg_out.forward(&mut ctx, r)?;
                        scales.push(ScaleOutput {
                            cls,
                            reg,
                            stride: h.stride,
                            size: s / h.stride,
                        });
                    }
                    x(0)
                }
            };
            outs.push(y);
        }
        let bindings = ctx.bindings();
        Ok(HeadOutputs { scales, bindings })
    }

    /// Per-unit multiply-accumulate table for a square input of `input_size`.
    ///
    /// Convolutions, FC layers and the two attention matrix products are
    /// counted; BatchNorm, activations, pooling and resampling are not.
    pub fn flop_table(&self, input_size: usize) -> Vec<FlopEntry> {
        let st = &self.store;
        let name = |u: &ConvUnit| {
            let n = &st.entry(u.weight).name;
            n.strip_suffix(".weight").unwrap_or(n).to_string()
        };
        let mut table = Vec::new();
        for l in &self.layers {
            let mut add = |n: String, macs: usize| {
                table.push(FlopEntry {
                    layer: l.index,
                    group: l.group(),
                    name: n,
                    macs,
                })
            };
            let h_out = input_size / l.stride;
            match &l.block {
                Block::Conv(u) => add(name(u), u.macs(st, h_out, h_out)),
                Block::Raam(r) => {
                    // Both pooled vectors pass through the shared FC stack.
                    for u in [&r.fc1, &r.fc2] {
                        add(name(u), 2 * u.macs(st, 1, 1));
                    }
                }
                Block::SppfPsa(sp, psa) => {
                    for u in [&sp.reduce, &sp.proj] {
                        add(name(u), u.macs(st, h_out, h_out));
                    }
                    for u in psa.units() {
                        add(name(u), u.macs(st, h_out, h_out));
                    }
                    let tokens = h_out * h_out;
                    let d = psa.q.out_channels(st);
                    add(format!("model.{}.c2psa.attention", l.index), 2 * tokens * tokens * d);
                }
                Block::Detect(heads) => {
                    let mut seen = std::collections::HashSet::new();
                    for h in heads {
                        let hs = input_size / h.stride;
                        let mut units: Vec<&ConvUnit> = h.proj.iter().collect();
                        units.extend(h.cls.iter().flat_map(|c| c.units()));
                        units.push(&h.cls_out);
                        units.extend(h.reg.iter().flat_map(|c| c.units()));
                        units.push(&h.reg_out);
                        for u in units {
                            // Shared units run once per scale; label them per scale.
                            let n = if seen.insert(u.weight) {
                                name(u)
                            } else {
                                format!("{}@s{}", name(u), h.stride)
                            };
                            add(n, u.macs(st, hs, hs));
                        }
                    }
                }
                b => {
                    for u in b.units() {
                        add(name(u), u.macs(st, h_out, h_out));
                    }
                }
            }
        }
        table
    }

    /// `2 × MACs` over the whole network.
    pub fn count_flops(&self, input_size: usize) -> usize {
        2 * self.flop_table(input_size).iter().map(|e| e.macs).sum::<usize>()
    }

    pub fn group_flops(&self, input_size: usize, group: Group) -> usize {
        2 * self
            .flop_table(input_size)
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.macs)
            .sum::<usize>()
    }

    /// Parameter ids of the classification stem used at each scale.
    pub fn cls_stem_ids(&self) -> Vec<Vec<ParamId>> {
        match &self.layers[DETECT_LAYER].block {
            Block::Detect(heads) => heads
                .iter()
                .map(|h| {
                    h.cls
                        .iter()
                        .flat_map(|c| c.units())
                        .chain(std::iter::once(&h.cls_out))
                        .flat_map(|u| u.param_ids())
                        .collect()
                })
                .collect(),
            _ => unreachable!("layer {DETECT_LAYER} is always the detect layer"),
        }
    }

    /// Evaluates the network on a batch and returns plain tensors per scale.
    pub fn predict(&mut self, images: Tensor) -> Result<Vec<RawScale>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(out
            .scales
            .iter()
            .map(|s| RawScale {
                cls: tape.value(s.cls).clone(),
                reg: tape.value(s.reg).clone(),
                stride: s.stride,
            })
            .collect())
    }
}

/// Detached head maps for one scale.
#[derive(Clone, Debug)]
pub struct RawScale {
    pub cls: Tensor,
    pub reg: Tensor,
    pub stride: usize,
}

fn feed(u: &ConvUnit, st: &ParamStore, c: usize, at: &str) -> Result<usize> {
    let want = u.in_channels(st);
    if want != c {
        let name = &st.entry(u.weight).name;
        return Err(Error::Config(format!("{at}: {name} expects {want} input channels, producer gives {c}")));
    }
    Ok(u.out_channels(st))
}

fn feed_spatial(s: &Spatial, st: &ParamStore, c: usize, at: &str) -> Result<usize> {
    s.units().iter().try_fold(c, |c, u| feed(u, st, c, at))
}

fn expect(got: usize, want: usize, at: &str, what: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Config(format!("{at}: {what} has {got} channels, expected {want}")))
    }
}

impl Model {
    /// Verifies that every consumer's input width equals its producers'
    /// output widths, e.g. after pruning or loading weights.
    pub fn check_structure(&self) -> Result<()> {
        let st = &self.store;
        let mut outs: Vec<usize> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let at = format!("layer {}", l.index);
            let ins: Vec<usize> = if l.inputs.is_empty() { vec![3] } else { l.inputs.iter().map(|&j| outs[j]).collect() };
            let c: usize = ins.iter().sum();
            let out = match &l.block {
                Block::Conv(u) | Block::DenseFuse(u) => feed(u, st, c, &at)?,
                Block::Down(s) => feed_spatial(s, st, c, &at)?,
                Block::Upsample => c,
                Block::C3k2(b) => {
                    expect(c, b.channels, &at, "C3k2 input")?;
                    let half = b.channels / 2;
                    let rest = b.channels - half;
                    for bn in &b.bottlenecks {
                        let m = feed_spatial(&bn.a, st, rest, &at)?;
                        let o = feed_spatial(&bn.b, st, m, &at)?;
                        expect(o, rest, &at, "bottleneck residual")?;
                    }
                    feed(&b.proj, st, half + rest, &at)?
                }
                Block::SppfPsa(sp, p) => {
                    let r = feed(&sp.reduce, st, c, &at)?;
                    let s = feed(&sp.proj, st, 4 * r, &at)?;
                    let y = feed(&p.cv1, st, s, &at)?;
                    expect(y, p.channels, &at, "C2PSA split input")?;
                    let half = p.channels / 2;
                    let rest = p.channels - half;
                    expect(st.get(p.pos).shape()[0], rest, &at, "position embedding")?;
                    let q = feed(&p.q, st, rest, &at)?;
                    expect(feed(&p.k, st, rest, &at)?, q, &at, "key projection")?;
                    let v = feed(&p.v, st, rest, &at)?;
                    expect(feed(&p.out, st, v, &at)?, rest, &at, "attention output")?;
                    let f = feed(&p.ffn1, st, rest, &at)?;
                    expect(feed(&p.ffn2, st, f, &at)?, rest, &at, "MLP output")?;
                    feed(&p.cv2, st, half + rest, &at)?
                }
                Block::Ghost(g) => {
                    let p = feed(&g.primary, st, c, &at)?;
                    2 * feed(&g.cheap, st, p, &at)?
                }
                Block::Raam(r) => {
                    let h = feed(&r.fc1, st, c, &at)?;
                    expect(feed(&r.fc2, st, h, &at)?, c, &at, "RAAM gate")?;
                    expect(st.get(r.beta).numel(), c, &at, "RAAM bias")?;
                    c
                }
                Block::Detect(heads) => {
                    for (h, &cs) in heads.iter().zip(&ins) {
                        let f = match &h.proj {
                            Some(p) => feed(p, st, cs, &at)?,
                            None => cs,
                        };
                        let c1 = h.cls.iter().try_fold(f, |c, s| feed_spatial(s, st, c, &at))?;
                        expect(feed(&h.cls_out, st, c1, &at)?, self.config.num_classes, &at, "class output")?;
                        let r1 = h.reg.iter().try_fold(f, |c, s| feed_spatial(s, st, c, &at))?;
                        expect(feed(&h.reg_out, st, r1, &at)?, 4 * self.config.reg_bins, &at, "box output")?;
                    }
                    l.c_out
                }
            };
            outs.push(out);
        }
        Ok(())
    }
}
