//! Differentiable primitives with hand-derived backward rules: dilated valid
//! convolution, ELU, batch normalization, inverted dropout, channel softmax
//! and cross-entropy. Forward functions never mutate their inputs; anything
//! random takes an explicit generator.

mod activation;
mod conv;
pub mod gradcheck;
mod loss;
mod norm;

pub use activation::{dropout, dropout_backward, elu, elu_backward, softmax_channels};
pub use conv::{conv2d, conv2d_backward, output_extent, ConvGrads};
pub use loss::cross_entropy;
pub use norm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, update_running_stats, BnCache,
};

use thiserror::Error;

/// Whether stochastic/statistics-bearing ops run in training or inference
/// behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Debug, Error)]
pub enum OpError {
    #[error("input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("spatial extent {h}x{w} smaller than the {need}x{need} footprint of a {k}x{k} kernel at dilation {d}")]
    InputTooSmall {
        h: usize,
        w: usize,
        k: usize,
        d: usize,
        need: usize,
    },
    #[error("bias has {len} entries for {channels} output channels")]
    BiasLength { len: usize, channels: usize },
    #[error("gradient shape {got:?} does not match {want:?}")]
    GradShape { got: Vec<usize>, want: Vec<usize> },
    #[error("batchnorm parameters sized for {param} channels, input has {input}")]
    NormChannelMismatch { param: usize, input: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("target map {th}x{tw} cannot enclose {h}x{w} output symmetrically")]
    TargetExtent {
        th: usize,
        tw: usize,
        h: usize,
        w: usize,
    },
}
