//! Elementwise and per-location activations: ELU, channel softmax, inverted
//! dropout.

use rand::Rng;

use super::{OpError, Phase};
use crate::tensor::{Scalar, Tensor};

/// y = x for x > 0, alpha * (exp(x) - 1) otherwise.
pub fn elu<T: Scalar>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    assert!(alpha > 0.0, "elu alpha must be positive");
    let a = T::from_f64(alpha);
    x.map(|v| if v > T::zero() { v } else { a * (v.exp() - T::one()) })
}

/// Backward from the saved output: with alpha > 0, y > 0 exactly when x > 0,
/// and on the negative branch dy/dx = y + alpha.
pub fn elu_backward<T: Scalar>(grad_out: &Tensor<T>, y: &Tensor<T>, alpha: f64) -> Tensor<T> {
    assert_eq!(grad_out.shape(), y.shape());
    let a = T::from_f64(alpha);
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &yv)| if yv > T::zero() { g } else { g * (yv + a) })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// Softmax over the channel axis, independently at every (batch, row, col)
/// location, with max subtraction so large logits stay finite.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (batch, k, h, w) = logits.dims4();
    assert!(k >= 2, "softmax needs at least two channels");
    let plane = h * w;
    let data = logits.data();
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let base = b * k * plane;
        for s in 0..plane {
            let mut maxv = data[base + s];
            for c in 1..k {
                let v = data[base + c * plane + s];
                if v > maxv {
                    maxv = v;
                }
            }
            let mut denom = T::zero();
            for c in 0..k {
                let e = (data[base + c * plane + s] - maxv).exp();
                out[base + c * plane + s] = e;
                denom = denom + e;
            }
            for c in 0..k {
                out[base + c * plane + s] = out[base + c * plane + s] / denom;
            }
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Inverted dropout. Train phase zeroes each element with probability `rate`
/// and scales survivors by 1/(1-rate); the returned mask holds those factors
/// so backward is an elementwise product. Infer phase passes through with an
/// all-ones mask.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    phase: Phase,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>), OpError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(OpError::DropoutRate(rate));
    }
    if phase == Phase::Infer || rate == 0.0 {
        return Ok((x.clone(), Tensor::filled(x.shape(), T::one())));
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mut mask = Tensor::zeros(x.shape());
    for m in mask.data_mut() {
        if rng.random::<f64>() >= rate {
            *m = keep_scale;
        }
    }
    let y = Tensor::from_vec(
        x.shape(),
        x.data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| v * m)
            .collect(),
    );
    Ok((y, mask))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    assert_eq!(grad_out.shape(), mask.shape());
    Tensor::from_vec(
        grad_out.shape(),
        grad_out
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&g, &m)| g * m)
            .collect(),
    )
}
