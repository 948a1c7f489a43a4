//! The 10-layer dilated segmentation network: configuration, receptive-field
//! and parameter analysis, weight initialization, forward/backward passes and
//! the on-disk weight format.

mod file;
mod forward;

pub use file::{load_weights, save_weights, WeightFileError};
pub use forward::{
    backward, forward_infer, forward_train, ForwardCache, GradSet, LayerGrads, BN_EPS,
    BN_MOMENTUM, DEFAULT_DROPOUT, ELU_ALPHA,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ops::OpError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Elu,
    Softmax,
}

/// One convolutional layer and its attachments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub out_channels: usize,
    pub bias: bool,
    pub batchnorm: bool,
    pub dropout: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("layer {layer}: {problem}")]
    BadLayer { layer: usize, problem: &'static str },
    #[error("network must end in a softmax layer with {classes} output channels")]
    BadHead { classes: usize },
    #[error("input {h}x{w} is smaller than the network's minimum extent {min}x{min}")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("weights do not match the configuration at layer {layer}")]
    WeightShape { layer: usize },
    #[error(transparent)]
    Op(#[from] OpError),
}

impl NetworkConfig {
    /// The published architecture: seven 3x3 feature layers with dilations
    /// 1,1,2,4,8,16,32, a 3x3 normalized layer, a 1x1 wide classifier stage,
    /// and a 1x1 softmax head.
    pub fn standard() -> Self {
        Self::with_width(32)
    }

    /// Same shape at a different feature width; the wide classifier layer
    /// keeps its 6x ratio to the feature width.
    pub fn with_width(width: usize) -> Self {
        assert!(width >= 1);
        let feature = |dilation| LayerSpec {
            kernel: 3,
            dilation,
            out_channels: width,
            bias: true,
            batchnorm: false,
            dropout: false,
            activation: Activation::Elu,
        };
        let mut layers: Vec<LayerSpec> = [1, 1, 2, 4, 8, 16, 32].map(feature).to_vec();
        layers.push(LayerSpec {
            kernel: 3,
            dilation: 1,
            out_channels: width,
            bias: false,
            batchnorm: true,
            dropout: true,
            activation: Activation::Elu,
        });
        layers.push(LayerSpec {
            kernel: 1,
            dilation: 1,
            out_channels: 6 * width,
            bias: false,
            batchnorm: true,
            dropout: true,
            activation: Activation::Elu,
        });
        layers.push(LayerSpec {
            kernel: 1,
            dilation: 1,
            out_channels: 3,
            bias: true,
            batchnorm: false,
            dropout: false,
            activation: Activation::Softmax,
        });
        NetworkConfig {
            in_channels: 1,
            layers,
            num_classes: 3,
        }
    }

    /// The same stack with every dilation collapsed to 1. Parameter counts
    /// are unchanged; only the receptive field shrinks.
    pub fn without_dilation(mut self) -> Self {
        for layer in &mut self.layers {
            layer.dilation = 1;
        }
        self
    }

    /// Structural soundness: kernel sizes, dilations, channel counts, and the
    /// rule that normalized layers carry no bias.
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.in_channels == 0 {
            return Err(NetworkError::BadLayer {
                layer: 0,
                problem: "input channel count must be positive",
            });
        }
        if self.layers.is_empty() {
            return Err(NetworkError::BadLayer {
                layer: 0,
                problem: "network has no layers",
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let layer_no = i + 1;
            if layer.kernel != 1 && layer.kernel != 3 {
                return Err(NetworkError::BadLayer {
                    layer: layer_no,
                    problem: "kernel size must be 1 or 3",
                });
            }
            if layer.dilation == 0 {
                return Err(NetworkError::BadLayer {
                    layer: layer_no,
                    problem: "dilation must be positive",
                });
            }
            if layer.out_channels == 0 {
                return Err(NetworkError::BadLayer {
                    layer: layer_no,
                    problem: "layer must have output channels",
                });
            }
            if layer.batchnorm && layer.bias {
                return Err(NetworkError::BadLayer {
                    layer: layer_no,
                    problem: "normalized layers carry no bias",
                });
            }
        }
        Ok(())
    }

    /// Full check for training and inference: structurally valid and ending
    /// in a softmax head sized for `num_classes`. Analysis (field and
    /// parameter tables) only needs `validate`.
    pub fn validate_runnable(&self) -> Result<(), NetworkError> {
        self.validate()?;
        let last = self.layers.last().unwrap();
        if last.activation != Activation::Softmax || last.out_channels != self.num_classes {
            return Err(NetworkError::BadHead {
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Input channel count of each layer.
    pub fn layer_inputs(&self) -> Vec<usize> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut ch = self.in_channels;
        for layer in &self.layers {
            inputs.push(ch);
            ch = layer.out_channels;
        }
        inputs
    }

    /// Smallest square input the stack accepts (equals the final receptive
    /// field; anything smaller leaves no valid output).
    pub fn min_input_extent(&self) -> usize {
        *receptive_field(self).last().unwrap_or(&1)
    }
}

/// Cumulative receptive-field extent after each layer:
/// field_l = field_{l-1} + (kernel_l - 1) * dilation_l, starting from 1.
pub fn receptive_field(config: &NetworkConfig) -> Vec<usize> {
    let mut field = 1;
    config
        .layers
        .iter()
        .map(|l| {
            field += (l.kernel - 1) * l.dilation;
            field
        })
        .collect()
}

/// Per-layer and total parameter counts. A layer counts kernel^2 * in * out
/// weights, plus out biases when present, plus 4 per channel (gamma, beta and
/// both running statistics) when normalized.
pub fn parameter_count(config: &NetworkConfig) -> (Vec<usize>, usize) {
    let per_layer: Vec<usize> = config
        .layers
        .iter()
        .zip(config.layer_inputs())
        .map(|(l, c_in)| {
            let mut n = l.kernel * l.kernel * c_in * l.out_channels;
            if l.bias {
                n += l.out_channels;
            }
            if l.batchnorm {
                n += 4 * l.out_channels;
            }
            n
        })
        .collect();
    let total = per_layer.iter().sum();
    (per_layer, total)
}

/// Batch-normalization parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub bn: Option<BnParams<T>>,
}

/// All parameters of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> WeightSet<T> {
    /// Flat views of every trainable tensor, in a fixed order (per layer:
    /// weights, bias, gamma, beta). Running statistics are not trainable.
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weights.data());
            if let Some(b) = &layer.bias {
                out.push(b.as_slice());
            }
            if let Some(bn) = &layer.bn {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    /// Mutable counterpart of [`WeightSet::trainable`], same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weights.data_mut());
            if let Some(b) = &mut layer.bias {
                out.push(b.as_mut_slice());
            }
            if let Some(bn) = &mut layer.bn {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        WeightSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.cast(),
                    bias: l.bias.as_deref().map(conv),
                    bn: l.bn.as_ref().map(|bn| BnParams {
                        gamma: conv(&bn.gamma),
                        beta: conv(&bn.beta),
                        running_mean: conv(&bn.running_mean),
                        running_var: conv(&bn.running_var),
                    }),
                })
                .collect(),
        }
    }
}

/// He-style initialization: weights from N(0, sqrt(2 / (kernel^2 * fan_in))),
/// biases and beta zero, gamma one, running statistics at the identity.
/// Values are drawn at 64-bit and narrowed, so one seed produces the same
/// network at either precision.
pub fn init_weights<T: Scalar>(config: &NetworkConfig, rng: &mut impl Rng) -> WeightSet<T> {
    let layers = config
        .layers
        .iter()
        .zip(config.layer_inputs())
        .map(|(l, c_in)| {
            let std = (2.0 / (l.kernel * l.kernel * c_in) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let n = l.kernel * l.kernel * c_in * l.out_channels;
            let weights = Tensor::from_vec(
                &[l.out_channels, c_in, l.kernel, l.kernel],
                (0..n).map(|_| T::from_f64(normal.sample(rng))).collect(),
            );
            LayerParams {
                weights,
                bias: l.bias.then(|| vec![T::zero(); l.out_channels]),
                bn: l.batchnorm.then(|| BnParams {
                    gamma: vec![T::one(); l.out_channels],
                    beta: vec![T::zero(); l.out_channels],
                    running_mean: vec![T::zero(); l.out_channels],
                    running_var: vec![T::one(); l.out_channels],
                }),
            }
        })
        .collect();
    WeightSet { layers }
}

/// Checks that `weights` has exactly the tensors `config` calls for.
pub fn check_weights<T: Scalar>(
    config: &NetworkConfig,
    weights: &WeightSet<T>,
) -> Result<(), NetworkError> {
    if weights.layers.len() != config.layers.len() {
        return Err(NetworkError::WeightShape { layer: 0 });
    }
    for (i, ((spec, c_in), params)) in config
        .layers
        .iter()
        .zip(config.layer_inputs())
        .zip(&weights.layers)
        .enumerate()
    {
        let want = [spec.out_channels, c_in, spec.kernel, spec.kernel];
        let ok = params.weights.shape() == want
            && params.bias.is_some() == spec.bias
            && params.bias.as_ref().is_none_or(|b| b.len() == spec.out_channels)
            && params.bn.is_some() == spec.batchnorm
            && params.bn.as_ref().is_none_or(|bn| {
                bn.gamma.len() == spec.out_channels
                    && bn.beta.len() == spec.out_channels
                    && bn.running_mean.len() == spec.out_channels
                    && bn.running_var.len() == spec.out_channels
            });
        if !ok {
            return Err(NetworkError::WeightShape { layer: i + 1 });
        }
    }
    Ok(())
}
