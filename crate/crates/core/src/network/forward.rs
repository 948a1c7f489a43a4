//! Forward and backward passes through a configured layer stack.
//!
//! Layer order is conv, batchnorm, activation, dropout. The backward entry
//! point takes the gradient at the final layer's pre-activation output, which
//! is what the cross-entropy op produces; the softmax itself is never
//! back-propagated separately.

use rand::Rng;

use super::{check_weights, Activation, NetworkConfig, NetworkError, WeightSet};
use crate::ops::{self, BnCache, Phase};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const ELU_ALPHA: f64 = 1.0;
pub const DEFAULT_DROPOUT: f64 = 0.5;

struct LayerCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    /// Layer output before dropout; ELU backward reads it, and for the final
    /// layer it holds the class probabilities.
    activated: Tensor<T>,
    dropout_mask: Option<Tensor<T>>,
}

/// Intermediate state of a train-phase forward pass.
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Batch statistics of a normalized layer, for the running-average
    /// update after the optimizer step.
    pub fn batch_stats(&self, layer: usize) -> Option<(&[T], &[T])> {
        self.layers[layer]
            .bn
            .as_ref()
            .map(|c| (c.batch_mean.as_slice(), c.batch_var.as_slice()))
    }
}

fn check_extent<T: Scalar>(
    config: &NetworkConfig,
    input: &Tensor<T>,
) -> Result<(), NetworkError> {
    let (_, c, h, w) = input.dims4();
    if c != config.in_channels {
        return Err(NetworkError::Op(ops::OpError::ChannelMismatch {
            input: c,
            kernel: config.in_channels,
        }));
    }
    let min = config.min_input_extent();
    if h < min || w < min {
        return Err(NetworkError::InputTooSmall { h, w, min });
    }
    Ok(())
}

/// Inference pass: running statistics for normalization, dropout skipped.
/// Pure; two calls with the same weights and input produce identical output.
pub fn forward_infer<T: Scalar>(
    config: &NetworkConfig,
    weights: &WeightSet<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>, NetworkError> {
    config.validate_runnable()?;
    check_weights(config, weights)?;
    check_extent(config, input)?;
    let mut x = input.clone();
    for (spec, params) in config.layers.iter().zip(&weights.layers) {
        x = ops::conv2d(&x, &params.weights, params.bias.as_deref(), spec.dilation)?;
        if let Some(bn) = &params.bn {
            x = ops::batchnorm_infer(
                &x,
                &bn.gamma,
                &bn.beta,
                &bn.running_mean,
                &bn.running_var,
                BN_EPS,
            )?;
        }
        x = match spec.activation {
            Activation::Elu => ops::elu(&x, ELU_ALPHA),
            Activation::Softmax => ops::softmax_channels(&x),
            Activation::None => x,
        };
    }
    Ok(x)
}

/// Train pass: batch statistics for normalization, dropout live. Returns the
/// class probabilities and the cache [`backward`] consumes.
pub fn forward_train<T: Scalar>(
    config: &NetworkConfig,
    weights: &WeightSet<T>,
    input: &Tensor<T>,
    dropout_rate: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, ForwardCache<T>), NetworkError> {
    config.validate_runnable()?;
    check_weights(config, weights)?;
    check_extent(config, input)?;

    let mut x = input.clone();
    let mut layers = Vec::with_capacity(config.layers.len());
    for (spec, params) in config.layers.iter().zip(&weights.layers) {
        let layer_input = x;
        let mut y = ops::conv2d(
            &layer_input,
            &params.weights,
            params.bias.as_deref(),
            spec.dilation,
        )?;
        let mut bn_cache = None;
        if let Some(bn) = &params.bn {
            let (normed, cache) = ops::batchnorm_train(&y, &bn.gamma, &bn.beta, BN_EPS)?;
            y = normed;
            bn_cache = Some(cache);
        }
        let activated = match spec.activation {
            Activation::Elu => ops::elu(&y, ELU_ALPHA),
            Activation::Softmax => ops::softmax_channels(&y),
            Activation::None => y,
        };
        let (out, mask) = if spec.dropout {
            let (out, mask) = ops::dropout(&activated, dropout_rate, Phase::Train, rng)?;
            (out, Some(mask))
        } else {
            (activated.clone(), None)
        };
        layers.push(LayerCache {
            input: layer_input,
            bn: bn_cache,
            activated,
            dropout_mask: mask,
        });
        x = out;
    }
    Ok((x, ForwardCache { layers }))
}

/// Gradients for one layer's parameters, shaped like its [`super::LayerParams`].
#[derive(Debug)]
pub struct LayerGrads<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

#[derive(Debug)]
pub struct GradSet<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> GradSet<T> {
    /// Flat views in the same order as [`WeightSet::trainable_mut`].
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weights.data());
            if let Some(b) = &layer.bias {
                out.push(b.as_slice());
            }
            if let Some(g) = &layer.gamma {
                out.push(g.as_slice());
                out.push(layer.beta.as_ref().unwrap().as_slice());
            }
        }
        out
    }
}

/// Back-propagates `grad_logits` (gradient at the final layer's
/// pre-activation output) through the cached pass, producing parameter
/// gradients for every layer.
pub fn backward<T: Scalar>(
    config: &NetworkConfig,
    weights: &WeightSet<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<GradSet<T>, NetworkError> {
    let last = config.layers.len() - 1;
    let mut grad = grad_logits.clone();
    let mut layers_rev = Vec::with_capacity(config.layers.len());
    for (l, (spec, params)) in config.layers.iter().zip(&weights.layers).enumerate().rev() {
        let lc = &cache.layers[l];
        if l != last {
            if let Some(mask) = &lc.dropout_mask {
                grad = ops::dropout_backward(&grad, mask);
            }
            grad = match spec.activation {
                Activation::Elu => ops::elu_backward(&grad, &lc.activated, ELU_ALPHA),
                Activation::None => grad,
                Activation::Softmax => {
                    return Err(NetworkError::BadLayer {
                        layer: l + 1,
                        problem: "softmax below the head is not trainable",
                    })
                }
            };
        }
        let (mut gamma, mut beta) = (None, None);
        if let Some(bn_cache) = &lc.bn {
            let bn = params.bn.as_ref().unwrap();
            let (gx, ggamma, gbeta) = ops::batchnorm_backward(&grad, bn_cache, &bn.gamma);
            grad = gx;
            gamma = Some(ggamma);
            beta = Some(gbeta);
        }
        let conv = ops::conv2d_backward(&grad, &lc.input, &params.weights, spec.bias, spec.dilation)?;
        grad = conv.input;
        layers_rev.push(LayerGrads {
            weights: conv.weights,
            bias: conv.bias,
            gamma,
            beta,
        });
    }
    layers_rev.reverse();
    Ok(GradSet { layers: layers_rev })
}
