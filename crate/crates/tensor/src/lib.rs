//! Dense `f64` tensors with the handful of kernels a small convolutional
//! detector needs (grouped convolution, pooling, nearest upsampling, channel
//! concat/split, batch normalization, spatial self-attention) and a
//! tape-based reverse-mode autodiff over exactly those ops.

mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use kernels::ConvSpec;
pub use tape::{attention_weights, BnStats, CustomOp, Mode, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
