//! Binary weight files. Layout, all little-endian:
//!
//! ```text
//! "DCNW"  version:u8  layerCount:u16
//! per layer: kernel:u8  dilation:u16  outChannels:u16  flags:u8
//!   flags: bit0 bias, bit1 batchnorm, bit2 dropout,
//!          bits3-4 activation (0 none, 1 elu, 2 softmax)
//! per layer, in order: weights, then bias / gamma / beta / runningMean /
//!   runningVar when the flags call for them; each tensor as
//!   rank:u8  dims:u32xrank  payload:f32xproduct
//! crc32:u32 over every preceding byte
//! ```
//!
//! Input channel counts are not stored; layer l reads them from the weight
//! tensor of layer l-1, and the first layer from its own second extent.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{
    check_weights, Activation, BnParams, LayerParams, LayerSpec, NetworkConfig, WeightSet,
};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCNW";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated weight file")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("layer {layer}: stored tensors contradict the layer table")]
    ShapeMismatch { layer: usize },
    #[error("layer {layer}: bad {field} value {value}")]
    BadField {
        layer: usize,
        field: &'static str,
        value: u32,
    },
    #[error("weights do not match the configuration being saved")]
    Inconsistent,
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::None => 0,
        Activation::Elu => 1,
        Activation::Softmax => 2,
    }
}

fn push_tensor(buf: &mut Vec<u8>, dims: &[usize], data: &[f32]) {
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_weights(
    config: &NetworkConfig,
    weights: &WeightSet<f32>,
    path: &Path,
) -> Result<(), WeightFileError> {
    check_weights(config, weights).map_err(|_| WeightFileError::Inconsistent)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    if config.layers.len() > u16::MAX as usize {
        return Err(WeightFileError::BadField {
            layer: 0,
            field: "layer count",
            value: config.layers.len() as u32,
        });
    }
    buf.extend_from_slice(&(config.layers.len() as u16).to_le_bytes());
    for (i, l) in config.layers.iter().enumerate() {
        if l.dilation > u16::MAX as usize {
            return Err(WeightFileError::BadField {
                layer: i + 1,
                field: "dilation",
                value: l.dilation as u32,
            });
        }
        if l.out_channels > u16::MAX as usize {
            return Err(WeightFileError::BadField {
                layer: i + 1,
                field: "channels",
                value: l.out_channels as u32,
            });
        }
        buf.push(l.kernel as u8);
        buf.extend_from_slice(&(l.dilation as u16).to_le_bytes());
        buf.extend_from_slice(&(l.out_channels as u16).to_le_bytes());
        let flags = (l.bias as u8)
            | (l.batchnorm as u8) << 1
            | (l.dropout as u8) << 2
            | activation_code(l.activation) << 3;
        buf.push(flags);
    }
    for params in &weights.layers {
        push_tensor(&mut buf, params.weights.shape(), params.weights.data());
        if let Some(b) = &params.bias {
            push_tensor(&mut buf, &[b.len()], b);
        }
        if let Some(bn) = &params.bn {
            push_tensor(&mut buf, &[bn.gamma.len()], &bn.gamma);
            push_tensor(&mut buf, &[bn.beta.len()], &bn.beta);
            push_tensor(&mut buf, &[bn.running_mean.len()], &bn.running_mean);
            push_tensor(&mut buf, &[bn.running_var.len()], &bn.running_var);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        if self.pos + n > self.bytes.len() {
            return Err(WeightFileError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>), WeightFileError> {
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }
}

fn read_vector(
    cur: &mut Cursor,
    want_len: usize,
    layer: usize,
) -> Result<Vec<f32>, WeightFileError> {
    let (dims, data) = cur.tensor()?;
    if dims.len() != 1 || dims[0] != want_len {
        return Err(WeightFileError::ShapeMismatch { layer });
    }
    Ok(data)
}

pub fn load_weights(path: &Path) -> Result<(NetworkConfig, WeightSet<f32>), WeightFileError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(WeightFileError::BadMagic);
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(WeightFileError::UnsupportedVersion(version));
    }

    let layer_count = cur.u16()? as usize;
    let mut specs = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let kernel = cur.u8()? as usize;
        let dilation = cur.u16()? as usize;
        let out_channels = cur.u16()? as usize;
        let flags = cur.u8()?;
        if kernel != 1 && kernel != 3 {
            return Err(WeightFileError::BadField {
                layer: i + 1,
                field: "kernel",
                value: kernel as u32,
            });
        }
        let activation = match (flags >> 3) & 0b11 {
            0 => Activation::None,
            1 => Activation::Elu,
            2 => Activation::Softmax,
            v => {
                return Err(WeightFileError::BadField {
                    layer: i + 1,
                    field: "activation",
                    value: v as u32,
                })
            }
        };
        specs.push(LayerSpec {
            kernel,
            dilation,
            out_channels,
            bias: flags & 1 != 0,
            batchnorm: (flags >> 1) & 1 != 0,
            dropout: (flags >> 2) & 1 != 0,
            activation,
        });
    }

    let mut layers = Vec::with_capacity(layer_count);
    let mut in_channels = None;
    let mut prev_out = 0;
    for (i, spec) in specs.iter().enumerate() {
        let layer = i + 1;
        let (dims, data) = cur.tensor()?;
        if dims.len() != 4
            || dims[0] != spec.out_channels
            || dims[2] != spec.kernel
            || dims[3] != spec.kernel
        {
            return Err(WeightFileError::ShapeMismatch { layer });
        }
        match in_channels {
            None => in_channels = Some(dims[1]),
            Some(_) if dims[1] == prev_out => {}
            Some(_) => return Err(WeightFileError::ShapeMismatch { layer }),
        }
        prev_out = spec.out_channels;
        let weights = Tensor::from_vec(&dims, data);

        let bias = spec
            .bias
            .then(|| read_vector(&mut cur, spec.out_channels, layer))
            .transpose()?;
        let bn = if spec.batchnorm {
            Some(BnParams {
                gamma: read_vector(&mut cur, spec.out_channels, layer)?,
                beta: read_vector(&mut cur, spec.out_channels, layer)?,
                running_mean: read_vector(&mut cur, spec.out_channels, layer)?,
                running_var: read_vector(&mut cur, spec.out_channels, layer)?,
            })
        } else {
            None
        };
        layers.push(LayerParams { weights, bias, bn });
    }

    let stored = cur.u32()?;
    if cur.pos != bytes.len() {
        return Err(WeightFileError::ShapeMismatch { layer: 0 });
    }
    let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(WeightFileError::ChecksumMismatch { stored, computed });
    }

    let config = NetworkConfig {
        in_channels: in_channels.unwrap_or(1),
        num_classes: specs.last().map_or(1, |s| s.out_channels),
        layers: specs,
    };
    Ok((config, WeightSet { layers }))
}
