//! Raw forward and backward kernels over flat NCHW buffers.
//!
//! Dense convolutions are lowered to im2col + GEMM; single-input-channel
//! groups (depthwise) run as direct loops. Everything is single-threaded and
//! therefore bit-deterministic.

use crate::error::{Result, TensorError};

/// Stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

/// Geometry of one convolution call, validated once.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], spec: ConvSpec) -> Result<Self> {
        let (n, c_in, h, w) = match x_shape {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(TensorError::shape("conv2d", format!("input must be NCHW, got {s:?}"))),
        };
        let (c_out, cig, kh, kw) = match k_shape {
            &[o, i, kh, kw] => (o, i, kh, kw),
            s => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("kernel must be [C_out, C_in/groups, K, K], got {s:?}"),
                ))
            }
        };
        if spec.stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
        }
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("C_in={c_in} and C_out={c_out} must both be divisible by groups={}", spec.groups),
            ));
        }
        if cig != c_in / spec.groups {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "kernel expects {cig} input channels per group, input provides {} ({c_in} channels / {} groups)",
                    c_in / spec.groups,
                    spec.groups
                ),
            ));
        }
        let hp = h + 2 * spec.padding;
        let wp = w + 2 * spec.padding;
        if hp < kh || wp < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("padded input {hp}x{wp} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
            spec,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    fn cig(&self) -> usize {
        self.c_in / self.spec.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.spec.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

/// `C(m×n) = alpha·A(m×k)·B(k×n) + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    debug_assert!(c.len() >= m * n);
    // SAFETY: extents and strides above stay within the borrowed slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom, channels: usize, col: &mut [f64]) {
    let (h, w, kh, kw, ho, wo) = (g.h, g.w, g.kh, g.kw, g.ho, g.wo);
    let (s, p) = (g.spec.stride as isize, g.spec.padding as isize);
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oi in 0..ho {
                    let ii = oi as isize * s - p + ki as isize;
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = oj as isize * s - p + kj as isize;
                        *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, channels: usize, dx: &mut [f64]) {
    let (h, w, kh, kw, ho, wo) = (g.h, g.w, g.kh, g.kw, g.ho, g.wo);
    let (s, p) = (g.spec.stride as isize, g.spec.padding as isize);
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oi in 0..ho {
                    let ii = oi as isize * s - p + ki as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = oj as isize * s - p + kj as isize;
                        if jj >= 0 && jj < w as isize {
                            drow[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Direct loop for groups with a single input channel (depthwise).
fn conv_single_channel(plane: &[f64], kernel: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (h, w, kh, kw, ho, wo) = (g.h, g.w, g.kh, g.kw, g.ho, g.wo);
    let (s, p) = (g.spec.stride as isize, g.spec.padding as isize);
    for oi in 0..ho {
        for oj in 0..wo {
            let mut acc = 0.0;
            for ki in 0..kh {
                let ii = oi as isize * s - p + ki as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let row = &plane[ii as usize * w..];
                for kj in 0..kw {
                    let jj = oj as isize * s - p + kj as isize;
                    if jj >= 0 && jj < w as isize {
                        acc += kernel[ki * kw + kj] * row[jj as usize];
                    }
                }
            }
            out[oi * wo + oj] = acc;
        }
    }
}

pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let (cig, cog) = (g.cig(), g.cog());
    let kk = g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.c_out * hw_out];
    let mut col = if cig > 1 && !g.is_pointwise() {
        vec![0.0; cig * kk * hw_out]
    } else {
        Vec::new()
    };
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let xg = &x[(n * g.c_in + grp * cig) * hw_in..(n * g.c_in + (grp + 1) * cig) * hw_in];
            let wg = &weight[grp * cog * cig * kk..(grp + 1) * cog * cig * kk];
            let og = &mut out[(n * g.c_out + grp * cog) * hw_out..(n * g.c_out + (grp + 1) * cog) * hw_out];
            if cig == 1 {
                for o in 0..cog {
                    conv_single_channel(xg, &wg[o * kk..(o + 1) * kk], g, &mut og[o * hw_out..(o + 1) * hw_out]);
                }
            } else if g.is_pointwise() {
                gemm(cog, cig, hw_out, wg, cig, 1, xg, hw_out, 1, 0.0, og);
            } else {
                im2col(xg, g, cig, &mut col);
                gemm(cog, cig * kk, hw_out, wg, cig * kk, 1, &col, hw_out, 1, 0.0, og);
            }
        }
        if let Some(b) = bias {
            for o in 0..g.c_out {
                let plane = &mut out[(n * g.c_out + o) * hw_out..(n * g.c_out + o + 1) * hw_out];
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

/// Gradients of a convolution. Each requested buffer is accumulated into.
pub struct ConvGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dw: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
}

pub fn conv2d_backward(x: &[f64], weight: &[f64], dy: &[f64], g: &ConvGeom, grads: ConvGrads<'_>) {
    let ConvGrads { mut dx, mut dw, db } = grads;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let (cig, cog) = (g.cig(), g.cog());
    let kk = g.kh * g.kw;
    if let Some(db) = db {
        for n in 0..g.n {
            for o in 0..g.c_out {
                db[o] += dy[(n * g.c_out + o) * hw_out..(n * g.c_out + o + 1) * hw_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let dense = cig > 1 && !g.is_pointwise();
    let mut col = if dense { vec![0.0; cig * kk * hw_out] } else { Vec::new() };
    let (s, p) = (g.spec.stride as isize, g.spec.padding as isize);
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let xoff = (n * g.c_in + grp * cig) * hw_in;
            let xg = &x[xoff..xoff + cig * hw_in];
            let woff = grp * cog * cig * kk;
            let wg = &weight[woff..woff + cog * cig * kk];
            let yoff = (n * g.c_out + grp * cog) * hw_out;
            let dyg = &dy[yoff..yoff + cog * hw_out];
            if cig == 1 {
                for o in 0..cog {
                    let dyo = &dyg[o * hw_out..(o + 1) * hw_out];
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let mut acc_w = 0.0;
                            for oi in 0..g.ho {
                                let ii = oi as isize * s - p + ki as isize;
                                if ii < 0 || ii >= g.h as isize {
                                    continue;
                                }
                                for oj in 0..g.wo {
                                    let jj = oj as isize * s - p + kj as isize;
                                    if jj < 0 || jj >= g.w as isize {
                                        continue;
                                    }
                                    let xi = ii as usize * g.w + jj as usize;
                                    let d = dyo[oi * g.wo + oj];
                                    acc_w += d * xg[xi];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xoff + xi] += d * wg[o * kk + ki * g.kw + kj];
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[woff + o * kk + ki * g.kw + kj] += acc_w;
                            }
                        }
                    }
                }
            } else if !dense {
                if let Some(dw) = dw.as_deref_mut() {
                    gemm(cog, hw_out, cig, dyg, hw_out, 1, xg, 1, hw_out, 1.0, &mut dw[woff..woff + cog * cig]);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    gemm(cig, cog, hw_out, wg, 1, cig, dyg, hw_out, 1, 1.0, &mut dx[xoff..xoff + cig * hw_in]);
                }
            } else {
                if let Some(dw) = dw.as_deref_mut() {
                    im2col(xg, g, cig, &mut col);
                    gemm(
                        cog,
                        hw_out,
                        cig * kk,
                        dyg,
                        hw_out,
                        1,
                        &col,
                        1,
                        hw_out,
                        1.0,
                        &mut dw[woff..woff + cog * cig * kk],
                    );
                }
                if let Some(dx) = dx.as_deref_mut() {
                    gemm(cig * kk, cog, hw_out, wg, 1, cig * kk, dyg, hw_out, 1, 0.0, &mut col);
                    col2im_add(&col, g, cig, &mut dx[xoff..xoff + cig * hw_in]);
                }
            }
        }
    }
}

/// Windowed max pooling with `-inf` padding. Returns the output and, per
/// output element, the flat input index that produced it (first maximum in
/// scan order).
pub fn max_pool2d(
    x: &[f64],
    shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, [usize; 4], Vec<usize>)> {
    let [n, c, h, w] = shape;
    if stride == 0 || k == 0 {
        return Err(TensorError::invalid("max_pool2d", "kernel and stride must be >= 1"));
    }
    if h + 2 * pad < k || w + 2 * pad < k || pad >= k {
        return Err(TensorError::shape(
            "max_pool2d",
            format!("spatial {h}x{w} with padding {pad} cannot hold a {k}x{k} window"),
        ));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..ho {
            let i0 = (oi * stride) as isize - pad as isize;
            let ilo = i0.max(0) as usize;
            let ihi = ((i0 + k as isize) as usize).min(h);
            for oj in 0..wo {
                let j0 = (oj * stride) as isize - pad as isize;
                let jlo = j0.max(0) as usize;
                let jhi = ((j0 + k as isize) as usize).min(w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + ilo * w + jlo;
                for ii in ilo..ihi {
                    for jj in jlo..jhi {
                        let v = x[base + ii * w + jj];
                        if v > best {
                            best = v;
                            best_i = base + ii * w + jj;
                        }
                    }
                }
                let o = (plane * ho + oi) * wo + oj;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((out, [n, c, ho, wo], arg))
}

pub fn upsample_nearest(x: &[f64], shape: [usize; 4], factor: usize) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oi in 0..ho {
            let row = &src[(oi / factor) * w..(oi / factor + 1) * w];
            for (oj, d) in dst[oi * wo..(oi + 1) * wo].iter_mut().enumerate() {
                *d = row[oj / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &[f64], shape: [usize; 4], factor: usize, dx: &mut [f64]) {
    let [n, c, h, w] = shape;
    let (ho, wo) = (h * factor, w * factor);
    for plane in 0..n * c {
        for oi in 0..ho {
            for oj in 0..wo {
                dx[plane * h * w + (oi / factor) * w + oj / factor] += dy[(plane * ho + oi) * wo + oj];
            }
        }
    }
}

/// Stacks NCHW buffers along the channel axis.
pub fn concat_channels(parts: &[(&[f64], usize)], n: usize, hw: usize) -> Vec<f64> {
    let c_total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(n * c_total * hw);
    for b in 0..n {
        for (data, c) in parts {
            out.extend_from_slice(&data[b * c * hw..(b + 1) * c * hw]);
        }
    }
    out
}

/// Copies channels `[start, start + len)` of an NCHW buffer.
pub fn slice_channels(x: &[f64], n: usize, c: usize, hw: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&x[(b * c + start) * hw..(b * c + start + len) * hw]);
    }
    out
}
