//! Composite blocks: Conv-BN-SiLU, depthwise-separable conv, C3k2 / DW-C3k2,
//! SPPF, C2PSA-lite, Ghost fusion and the ripeness-aware channel attention.
//!
//! Every block keeps [`ParamId`]s into a [`ParamStore`]; forward passes run
//! through a [`Ctx`]. Each block also knows its trainable parameter count in
//! closed form so that it can be checked against tensor enumeration.

use rand::Rng;
use ripeloc_tensor::{ConvSpec, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{uniform_init, Ctx, ParamId, ParamKind, ParamStore};

/// RAAM bottleneck reduction ratio.
pub const RAAM_REDUCTION: usize = 4;
/// Bottleneck blocks per C3k2.
pub const C3K2_BOTTLENECKS: usize = 2;

#[derive(Clone, Debug)]
pub struct Bn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// One convolution with optional bias, BatchNorm and SiLU, in that order.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<Bn>,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub act: bool,
}

impl ConvUnit {
    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        let s = store.get(self.weight).shape();
        if self.depthwise {
            s[0]
        } else {
            s[1]
        }
    }

    pub fn kernel(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[2]
    }

    pub fn spec(&self, store: &ParamStore) -> ConvSpec {
        let groups = if self.depthwise { self.out_channels(store) } else { 1 };
        ConvSpec::new(self.stride, self.padding, groups)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let spec = self.spec(ctx.store);
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        let mut y = ctx.tape.conv2d(x, w, b, spec)?;
        if let Some(bn) = &self.bn {
            y = ctx.batch_norm(y, bn)?;
        }
        if self.act {
            y = ctx.tape.silu(y);
        }
        Ok(y)
    }

    /// Multiply-accumulates for an output of `ho × wo`.
    pub fn macs(&self, store: &ParamStore, ho: usize, wo: usize) -> usize {
        let s = store.get(self.weight).shape();
        s[0] * s[1] * s[2] * s[3] * ho * wo
    }

    pub fn out_extent(&self, store: &ParamStore, h: usize) -> usize {
        let k = self.kernel(store);
        (h + 2 * self.padding - k) / self.stride + 1
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        if let Some(bn) = &self.bn {
            v.extend([bn.gamma, bn.beta, bn.mean, bn.var]);
        }
        v
    }
}

/// Depthwise `K×K` (linear) followed by pointwise Conv-BN-SiLU.
#[derive(Clone, Debug)]
pub struct DsConv {
    pub dw: ConvUnit,
    pub pw: ConvUnit,
}

/// A `3×3` spatial stage: either a dense convolution or its separable form.
#[derive(Clone, Debug)]
pub enum Spatial {
    Dense(ConvUnit),
    Separable(DsConv),
}

impl Spatial {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Spatial::Dense(c) => c.forward(ctx, x),
            Spatial::Separable(ds) => {
                let y = ds.dw.forward(ctx, x)?;
                ds.pw.forward(ctx, y)
            }
        }
    }

    pub fn units(&self) -> Vec<&ConvUnit> {
        match self {
            Spatial::Dense(c) => vec![c],
            Spatial::Separable(ds) => vec![&ds.dw, &ds.pw],
        }
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        match self {
            Spatial::Dense(c) => c.out_channels(store),
            Spatial::Separable(ds) => ds.pw.out_channels(store),
        }
    }
}

/// `x + b(a(x))`.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub a: Spatial,
    pub b: Spatial,
}

/// CSP block: the second channel half runs through the bottlenecks, the
/// first half bypasses them, and a `1×1` projection mixes both.
#[derive(Clone, Debug)]
pub struct C3k2 {
    pub channels: usize,
    pub bottlenecks: Vec<Bottleneck>,
    pub proj: ConvUnit,
}

impl C3k2 {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let half = self.channels / 2;
        let (keep, mut y) = ctx.tape.split_channels(x, half)?;
        for bn in &self.bottlenecks {
            let a = bn.a.forward(ctx, y)?;
            let b = bn.b.forward(ctx, a)?;
            y = ctx.tape.add(y, b)?;
        }
        let cat = ctx.tape.concat_channels(&[keep, y])?;
        self.proj.forward(ctx, cat)
    }

    pub fn units(&self) -> Vec<&ConvUnit> {
        let mut v: Vec<&ConvUnit> = self
            .bottlenecks
            .iter()
            .flat_map(|b| b.a.units().into_iter().chain(b.b.units()))
            .collect();
        v.push(&self.proj);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Sppf {
    pub reduce: ConvUnit,
    pub proj: ConvUnit,
}

impl Sppf {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let r = self.reduce.forward(ctx, x)?;
        let m1 = ctx.tape.max_pool(r, 5, 1, 2)?;
        let m2 = ctx.tape.max_pool(m1, 5, 1, 2)?;
        let m3 = ctx.tape.max_pool(m2, 5, 1, 2)?;
        let cat = ctx.tape.concat_channels(&[r, m1, m2, m3])?;
        self.proj.forward(ctx, cat)
    }
}

/// CSP block whose second half runs one single-head spatial self-attention
/// layer (with learned additive position embedding) and a pointwise MLP.
#[derive(Clone, Debug)]
pub struct C2Psa {
    pub channels: usize,
    pub cv1: ConvUnit,
    pub pos: ParamId,
    pub q: ConvUnit,
    pub k: ConvUnit,
    pub v: ConvUnit,
    pub out: ConvUnit,
    pub ffn1: ConvUnit,
    pub ffn2: ConvUnit,
    pub cv2: ConvUnit,
}

impl C2Psa {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let (a, b) = ctx.tape.split_channels(y, self.channels / 2)?;
        let pos = ctx.param(self.pos);
        let bp = ctx.tape.add_broadcast(b, pos)?;
        let q = self.q.forward(ctx, bp)?;
        let k = self.k.forward(ctx, bp)?;
        let v = self.v.forward(ctx, bp)?;
        let att = ctx.tape.attention(q, k, v)?;
        let o = self.out.forward(ctx, att)?;
        let b2 = ctx.tape.add(b, o)?;
        let f = self.ffn1.forward(ctx, b2)?;
        let f = self.ffn2.forward(ctx, f)?;
        let b3 = ctx.tape.add(b2, f)?;
        let cat = ctx.tape.concat_channels(&[a, b3])?;
        self.cv2.forward(ctx, cat)
    }

    pub fn units(&self) -> Vec<&ConvUnit> {
        vec![&self.cv1, &self.q, &self.k, &self.v, &self.out, &self.ffn1, &self.ffn2, &self.cv2]
    }
}

/// Ripeness-aware attention: `F ⊗ σ(FC(GAP F) + FC(GMP F) + β)` with one
/// two-layer FC bottleneck shared by both pooled vectors.
#[derive(Clone, Debug)]
pub struct Raam {
    pub fc1: ConvUnit,
    pub fc2: ConvUnit,
    pub beta: ParamId,
}

impl Raam {
    fn fc(&self, ctx: &mut Ctx<'_>, v: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, v)?;
        self.fc2.forward(ctx, h)
    }

    /// Pre-sigmoid gate logits, `N×C×1×1`.
    pub fn logits(&self, ctx: &mut Ctx<'_>, f: Var) -> Result<Var> {
        let c = ctx.tape.shape(f)[1];
        if ctx.store.get(self.beta).numel() != c {
            return Err(Error::Config(format!(
                "RAAM bias has {} entries but the feature map has {c} channels",
                ctx.store.get(self.beta).numel()
            )));
        }
        let gap = ctx.tape.global_avg_pool(f)?;
        let gmp = ctx.tape.global_max_pool(f)?;
        let a = self.fc(ctx, gap)?;
        let m = self.fc(ctx, gmp)?;
        let s = ctx.tape.add(a, m)?;
        let beta = ctx.param(self.beta);
        Ok(ctx.tape.add_broadcast(s, beta)?)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, f: Var) -> Result<Var> {
        let logits = self.logits(ctx, f)?;
        let gate = ctx.tape.sigmoid(logits);
        Ok(ctx.tape.mul_channel(f, gate)?)
    }
}

/// Fusion node: concat inputs, `1×1` Conv-BN-SiLU to half the output width,
/// then a linear depthwise `3×3` produces the other half.
#[derive(Clone, Debug)]
pub struct Ghost {
    pub primary: ConvUnit,
    pub cheap: ConvUnit,
}

impl Ghost {
    pub fn forward(&self, ctx: &mut Ctx<'_>, inputs: &[Var]) -> Result<Var> {
        let cat = ctx.tape.concat_channels(inputs)?;
        let p = self.primary.forward(ctx, cat)?;
        let g = self.cheap.forward(ctx, p)?;
        Ok(ctx.tape.concat_channels(&[p, g])?)
    }
}

/// Options for a single convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub stride: usize,
    pub bias: bool,
    pub bn: bool,
    pub act: bool,
}

impl ConvOpts {
    /// Conv-BN-SiLU.
    pub const CBS: ConvOpts = ConvOpts {
        stride: 1,
        bias: false,
        bn: true,
        act: true,
    };
    /// Conv-BN without activation.
    pub const CB: ConvOpts = ConvOpts {
        stride: 1,
        bias: false,
        bn: true,
        act: false,
    };
    /// Plain convolution with bias.
    pub const LINEAR: ConvOpts = ConvOpts {
        stride: 1,
        bias: true,
        bn: false,
        act: false,
    };

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn act(mut self, on: bool) -> Self {
        self.act = on;
        self
    }
}

/// Allocates block parameters in a store under a name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub layer: usize,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, layer: usize, prefix: impl Into<String>) -> Self {
        Self {
            store,
            rng,
            layer,
            prefix: prefix.into(),
        }
    }

    pub fn set_layer(&mut self, layer: usize, prefix: impl Into<String>) {
        self.layer = layer;
        self.prefix = prefix.into();
    }

    fn name(&self, s: &str) -> String {
        if self.prefix.is_empty() {
            s.to_string()
        } else {
            format!("{}.{s}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor, kind: ParamKind) -> ParamId {
        let n = self.name(name);
        self.store.add(n, t, kind, self.layer)
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.tensor(&format!("{name}.bn.weight"), Tensor::ones(&[c]), ParamKind::Weight),
            beta: self.tensor(&format!("{name}.bn.bias"), Tensor::zeros(&[c]), ParamKind::Weight),
            mean: self.tensor(&format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            var: self.tensor(&format!("{name}.bn.running_var"), Tensor::ones(&[c]), ParamKind::Buffer),
        }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, o: ConvOpts) -> ConvUnit {
        let w = uniform_init(&[c_out, c_in, k, k], c_in * k * k, self.rng);
        let weight = self.tensor(&format!("{name}.weight"), w, ParamKind::Weight);
        let bias = o
            .bias
            .then(|| self.tensor(&format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Weight));
        let bn = o.bn.then(|| self.bn(name, c_out));
        ConvUnit {
            weight,
            bias,
            bn,
            stride: o.stride,
            padding: k / 2,
            depthwise: false,
            act: o.act,
        }
    }

    pub fn depthwise(&mut self, name: &str, c: usize, k: usize, o: ConvOpts) -> ConvUnit {
        let w = uniform_init(&[c, 1, k, k], k * k, self.rng);
        let weight = self.tensor(&format!("{name}.weight"), w, ParamKind::Weight);
        let bias = o
            .bias
            .then(|| self.tensor(&format!("{name}.bias"), Tensor::zeros(&[c]), ParamKind::Weight));
        let bn = o.bn.then(|| self.bn(name, c));
        ConvUnit {
            weight,
            bias,
            bn,
            stride: o.stride,
            padding: k / 2,
            depthwise: true,
            act: o.act,
        }
    }

    pub fn ds_conv(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> DsConv {
        DsConv {
            dw: self.depthwise(
                &format!("{name}.dw"),
                c_in,
                3,
                ConvOpts {
                    stride,
                    bias: false,
                    bn: false,
                    act: false,
                },
            ),
            pw: self.conv(&format!("{name}.pw"), c_in, c_out, 1, ConvOpts::CBS),
        }
    }

    pub fn spatial(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize, separable: bool) -> Spatial {
        if separable {
            Spatial::Separable(self.ds_conv(name, c_in, c_out, stride))
        } else {
            Spatial::Dense(self.conv(name, c_in, c_out, 3, ConvOpts::CBS.stride(stride)))
        }
    }

    pub fn c3k2(&mut self, name: &str, c: usize, c_out: usize, separable: bool) -> Result<C3k2> {
        if c % 2 != 0 || c == 0 {
            return Err(Error::Config(format!("C3k2 needs an even channel count, got {c}")));
        }
        let h = c / 2;
        let bottlenecks = (0..C3K2_BOTTLENECKS)
            .map(|i| Bottleneck {
                a: self.spatial(&format!("{name}.m{i}.a"), h, h, 1, separable),
                b: self.spatial(&format!("{name}.m{i}.b"), h, h, 1, separable),
            })
            .collect();
        let proj = self.conv(&format!("{name}.proj"), c, c_out, 1, ConvOpts::CBS);
        Ok(C3k2 {
            channels: c,
            bottlenecks,
            proj,
        })
    }

    pub fn sppf(&mut self, name: &str, c: usize) -> Sppf {
        let h = c / 2;
        Sppf {
            reduce: self.conv(&format!("{name}.reduce"), c, h, 1, ConvOpts::CBS),
            proj: self.conv(&format!("{name}.proj"), 4 * h, c, 1, ConvOpts::CBS),
        }
    }

    /// `grid` is the spatial extent the position embedding covers.
    pub fn c2psa(&mut self, name: &str, c: usize, grid: (usize, usize)) -> Result<C2Psa> {
        if c % 2 != 0 {
            return Err(Error::Config(format!("C2PSA needs an even channel count, got {c}")));
        }
        let h = c / 2;
        let pos = Tensor::from_fn(&[h, grid.0, grid.1], |_| self.rng.random_range(-0.02..0.02));
        Ok(C2Psa {
            channels: c,
            cv1: self.conv(&format!("{name}.cv1"), c, c, 1, ConvOpts::CBS),
            pos: self.tensor(&format!("{name}.pos"), pos, ParamKind::Weight),
            q: self.conv(&format!("{name}.q"), h, h, 1, ConvOpts::LINEAR),
            k: self.conv(&format!("{name}.k"), h, h, 1, ConvOpts::LINEAR),
            v: self.conv(&format!("{name}.v"), h, h, 1, ConvOpts::LINEAR),
            out: self.conv(&format!("{name}.out"), h, h, 1, ConvOpts::LINEAR),
            ffn1: self.conv(&format!("{name}.ffn1"), h, 2 * h, 1, ConvOpts::CBS),
            ffn2: self.conv(&format!("{name}.ffn2"), 2 * h, h, 1, ConvOpts::CB),
            cv2: self.conv(&format!("{name}.cv2"), c, c, 1, ConvOpts::CBS),
        })
    }

    pub fn raam(&mut self, name: &str, c: usize) -> Raam {
        let hidden = (c / RAAM_REDUCTION).max(1);
        Raam {
            fc1: self.conv(&format!("{name}.fc1"), c, hidden, 1, ConvOpts::LINEAR.act(true)),
            fc2: self.conv(&format!("{name}.fc2"), hidden, c, 1, ConvOpts::LINEAR),
            beta: self.tensor(&format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Weight),
        }
    }

    pub fn ghost(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<Ghost> {
        if c_out % 2 != 0 {
            return Err(Error::Config(format!("Ghost fusion needs an even output width, got {c_out}")));
        }
        let h = c_out / 2;
        Ok(Ghost {
            primary: self.conv(&format!("{name}.primary"), c_in, h, 1, ConvOpts::CBS),
            cheap: self.depthwise(
                &format!("{name}.cheap"),
                h,
                3,
                ConvOpts {
                    stride: 1,
                    bias: false,
                    bn: false,
                    act: false,
                },
            ),
        })
    }
}

/// Closed-form trainable parameter counts (BatchNorm contributes γ and β).
pub mod formula {
    use super::{C3K2_BOTTLENECKS, RAAM_REDUCTION};

    pub fn conv_bn(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * c_out * k * k + 2 * c_out
    }

    pub fn conv_bias(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * c_out * k * k + c_out
    }

    /// Linear depthwise `k×k` plus pointwise Conv-BN.
    pub fn ds_conv(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * k * k + conv_bn(c_in, c_out, 1)
    }

    pub fn c3k2(c: usize, c_out: usize, separable: bool) -> usize {
        let h = c / 2;
        let stage = if separable { ds_conv(h, h, 3) } else { conv_bn(h, h, 3) };
        2 * C3K2_BOTTLENECKS * stage + conv_bn(c, c_out, 1)
    }

    pub fn sppf(c: usize) -> usize {
        conv_bn(c, c / 2, 1) + conv_bn(2 * c, c, 1)
    }

    pub fn c2psa(c: usize, grid: (usize, usize)) -> usize {
        let h = c / 2;
        2 * conv_bn(c, c, 1) + h * grid.0 * grid.1 + 4 * conv_bias(h, h, 1) + conv_bn(h, 2 * h, 1) + conv_bn(2 * h, h, 1)
    }

    pub fn raam(c: usize) -> usize {
        let hid = (c / RAAM_REDUCTION).max(1);
        conv_bias(c, hid, 1) + conv_bias(hid, c, 1) + c
    }

    pub fn ghost(c_in: usize, c_out: usize) -> usize {
        conv_bn(c_in, c_out / 2, 1) + (c_out / 2) * 9
    }
}
