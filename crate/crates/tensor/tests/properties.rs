mod common;

use common::naive_conv;
use proptest::prelude::*;
use ripeloc_tensor::{ConvSpec, Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn conv(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Tensor {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k.clone());
    let y = t.conv2d(xv, kv, None, spec).unwrap();
    t.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear(
        x in tensor(vec![1, 3, 6, 6]),
        y in tensor(vec![1, 3, 6, 6]),
        k in tensor(vec![4, 3, 3, 3]),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        stride in 1usize..3,
    ) {
        let spec = ConvSpec::new(stride, 1, 1);
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv(&mix, &k, spec);
        let cx = conv(&x, &k, spec);
        let cy = conv(&y, &k, spec);
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * cx.data()[i] + b * cy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    /// W[o,i,:,:] = p[o,i]·d[i,:,:] is exactly depthwise-then-pointwise.
    #[test]
    fn separable_composition_matches_dense(
        x in tensor(vec![2, 3, 5, 5]),
        d in tensor(vec![3, 1, 3, 3]),
        p in tensor(vec![4, 3, 1, 1]),
    ) {
        let dense = Tensor::from_fn(&[4, 3, 3, 3], |idx| {
            let o = idx / 27;
            let i = (idx / 9) % 3;
            p.data()[o * 3 + i] * d.data()[i * 9 + idx % 9]
        });
        let want = naive_conv(&x, &dense, None, 1, 1, 1);
        let dw = conv(&x, &d, ConvSpec::new(1, 1, 3));
        let got = conv(&dw, &p, ConvSpec::new(1, 0, 1));
        prop_assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic(
        x in tensor(vec![2, 4, 5, 5]),
        k in tensor(vec![4, 2, 3, 3]),
    ) {
        let run = || {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone().with_requires_grad());
            let kv = t.leaf(k.clone().with_requires_grad());
            let y = t.conv2d(xv, kv, None, ConvSpec::new(1, 1, 2)).unwrap();
            let y = t.silu(y);
            let p = t.max_pool(y, 5, 1, 2).unwrap();
            let s = t.sum(p);
            t.backward(s).unwrap();
            (t.value(p).clone(), t.grad(xv).unwrap().to_vec(), t.grad(kv).unwrap().to_vec())
        };
        let a = run();
        let b = run();
        prop_assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(a.2, b.2);
    }

    #[test]
    fn upsample_then_average_recovers_input(x in tensor(vec![1, 2, 3, 4]), f in 1usize..4) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let u = t.upsample_nearest(xv, f).unwrap();
        let ud = t.value(u).data();
        let (h, w) = (3 * f, 4 * f);
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    for di in 0..f {
                        for dj in 0..f {
                            prop_assert_eq!(
                                ud[(c * h + i * f + di) * w + j * f + dj],
                                x.data()[(c * 3 + i) * 4 + j]
                            );
                        }
                    }
                }
            }
        }
    }
}
