//! Valid (unpadded) 2D convolution with kernel dilation. Dilation `d` samples
//! the input every `d` voxels under each kernel tap, so a `k`x`k` kernel
//! covers a footprint of `(k-1)*d + 1` voxels per axis.

use rayon::prelude::*;

use super::OpError;
use crate::tensor::{Scalar, Tensor};

/// Output extent of a valid convolution along one axis.
pub fn output_extent(input: usize, kernel: usize, dilation: usize) -> Option<usize> {
    let span = (kernel - 1) * dilation;
    input.checked_sub(span).filter(|&e| e > 0)
}

fn check_geometry<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    dilation: usize,
) -> Result<(usize, usize), OpError> {
    assert!(dilation >= 1, "dilation must be positive");
    let (_, c_in, h, w) = input.dims4();
    let (c_out, k_in, kh, kw) = weights.dims4();
    assert_eq!(kh, kw, "kernels are square");
    if k_in != c_in {
        return Err(OpError::ChannelMismatch {
            input: c_in,
            kernel: k_in,
        });
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(OpError::BiasLength {
                len: b.len(),
                channels: c_out,
            });
        }
    }
    match (output_extent(h, kh, dilation), output_extent(w, kw, dilation)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(OpError::InputTooSmall {
            h,
            w,
            k: kh,
            d: dilation,
            need: (kh - 1) * dilation + 1,
        }),
    }
}

/// out(b,o,r,t) = bias(o) + sum over (c,i,j) of in(b,c,r+i*d,t+j*d) * w(o,c,i,j).
///
/// The loop is arranged as row-wise accumulation so each (c,i,j) tap touches
/// contiguous input and output slices. Output planes are computed in parallel;
/// every plane is a pure sequential sum, so results do not depend on the
/// worker count.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    dilation: usize,
) -> Result<Tensor<T>, OpError> {
    let (oh, ow) = check_geometry(input, weights, bias, dilation)?;
    let (batch, c_in, h, w) = input.dims4();
    let (c_out, _, kh, kw) = weights.dims4();

    let idata = input.data();
    let wdata = weights.data();
    let mut out = Tensor::zeros(&[batch, c_out, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(slot, oplane)| {
            let b = slot / c_out;
            let o = slot % c_out;
            if let Some(bv) = bias {
                oplane.fill(bv[o]);
            }
            for c in 0..c_in {
                let iplane = &idata[(b * c_in + c) * h * w..][..h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = wdata[((o * c_in + c) * kh + i) * kw + j];
                        for r in 0..oh {
                            let irow = &iplane[(r + i * dilation) * w + j * dilation..][..ow];
                            let orow = &mut oplane[r * ow..][..ow];
                            for (acc, &x) in orow.iter_mut().zip(irow) {
                                *acc = *acc + wv * x;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its inputs.
#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

/// Exact adjoints of [`conv2d`]: the input gradient scatters `grad_out`
/// through the kernel taps, the weight gradient correlates input windows with
/// `grad_out`, and the bias gradient sums `grad_out` per output channel.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    dilation: usize,
) -> Result<ConvGrads<T>, OpError> {
    let (oh, ow) = check_geometry(input, weights, None, dilation)?;
    let (batch, c_in, h, w) = input.dims4();
    let (c_out, _, kh, kw) = weights.dims4();
    let want = [batch, c_out, oh, ow];
    if grad_out.shape() != want {
        return Err(OpError::GradShape {
            got: grad_out.shape().to_vec(),
            want: want.to_vec(),
        });
    }

    let gdata = grad_out.data();
    let idata = input.data();
    let wdata = weights.data();

    let mut grad_input = Tensor::zeros(&[batch, c_in, h, w]);
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(slot, gplane)| {
            let b = slot / c_in;
            let c = slot % c_in;
            for o in 0..c_out {
                let goplane = &gdata[(b * c_out + o) * oh * ow..][..oh * ow];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = wdata[((o * c_in + c) * kh + i) * kw + j];
                        for r in 0..oh {
                            let grow = &goplane[r * ow..][..ow];
                            let target = &mut gplane[(r + i * dilation) * w + j * dilation..][..ow];
                            for (acc, &g) in target.iter_mut().zip(grow) {
                                *acc = *acc + wv * g;
                            }
                        }
                    }
                }
            }
        });

    let mut grad_weights = Tensor::zeros(&[c_out, c_in, kh, kw]);
    grad_weights
        .data_mut()
        .par_chunks_mut(c_in * kh * kw)
        .enumerate()
        .for_each(|(o, gw)| {
            for c in 0..c_in {
                for i in 0..kh {
                    for j in 0..kw {
                        let mut acc = T::zero();
                        for b in 0..batch {
                            let iplane = &idata[(b * c_in + c) * h * w..][..h * w];
                            let goplane = &gdata[(b * c_out + o) * oh * ow..][..oh * ow];
                            for r in 0..oh {
                                let irow = &iplane[(r + i * dilation) * w + j * dilation..][..ow];
                                let grow = &goplane[r * ow..][..ow];
                                let mut dot = T::zero();
                                for (&x, &g) in irow.iter().zip(grow) {
                                    dot = dot + x * g;
                                }
                                acc = acc + dot;
                            }
                        }
                        gw[(c * kh + i) * kw + j] = acc;
                    }
                }
            }
        });

    let grad_bias = has_bias.then(|| {
        (0..c_out)
            .map(|o| {
                let mut acc = T::zero();
                for b in 0..batch {
                    let goplane = &gdata[(b * c_out + o) * oh * ow..][..oh * ow];
                    for &g in goplane {
                        acc = acc + g;
                    }
                }
                acc
            })
            .collect()
    });

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}
