#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ripeloc_tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop convolution used as the reference for every kernel path.
pub fn naive_conv(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (cout, cig, kh, kw) = k.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cog = cout / groups;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            let g = o / cog;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..cig {
                        let c = g * cig + ci;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + c) * h + ii as usize) * w + jj as usize]
                                    * k.data()[((o * cig + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + oi) * wo + oj] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}
