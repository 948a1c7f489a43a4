//! Batch normalization over (batch, rows, cols) per channel. Channel
//! statistics accumulate in f64 regardless of tensor precision; population
//! variance is used both for normalization and for the running statistics.

use super::OpError;
use crate::tensor::{Scalar, Tensor};

/// Saved forward state needed by [`batchnorm_backward`], plus the batch
/// statistics the caller folds into the running estimates after the step.
#[derive(Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn check_channels<T: Scalar>(x: &Tensor<T>, params: &[&[T]]) -> Result<usize, OpError> {
    let (_, c, _, _) = x.dims4();
    for p in params {
        if p.len() != c {
            return Err(OpError::NormChannelMismatch {
                param: p.len(),
                input: c,
            });
        }
    }
    Ok(c)
}

/// Per-channel mean and population variance over (batch, rows, cols).
fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (batch, c, h, w) = x.dims4();
    let plane = h * w;
    let n = (batch * plane) as f64;
    let data = x.data();
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..batch {
            let p = &data[(b * c + ch) * plane..][..plane];
            for &v in p {
                sum += v.to_f64();
            }
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for b in 0..batch {
            let p = &data[(b * c + ch) * plane..][..plane];
            for &v in p {
                let d = v.to_f64() - mean;
                sq += d * d;
            }
        }
        means.push(mean);
        vars.push(sq / n);
    }
    (means, vars)
}

/// Train-phase forward: normalize with the batch statistics, scale by gamma,
/// shift by beta. Pure; the running-statistics update is the caller's move,
/// using `cache.batch_mean` / `cache.batch_var`.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>), OpError> {
    let c = check_channels(x, &[gamma, beta])?;
    let (batch, _, rows, cols) = x.dims4();
    let plane = rows * cols;
    let (means, vars) = channel_stats(x);
    let inv: Vec<f64> = vars.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let xh = xhat.data_mut();
    let yd = y.data_mut();
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, iv) = (means[ch], inv[ch]);
            let (g, be) = (gamma[ch], beta[ch]);
            for s in 0..plane {
                let xn = T::from_f64((xd[off + s].to_f64() - m) * iv);
                xh[off + s] = xn;
                yd[off + s] = g * xn + be;
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std: inv.iter().map(|&v| T::from_f64(v)).collect(),
        batch_mean: means.iter().map(|&v| T::from_f64(v)).collect(),
        batch_var: vars.iter().map(|&v| T::from_f64(v)).collect(),
    };
    Ok((y, cache))
}

/// Infer-phase forward using the running statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>, OpError> {
    let c = check_channels(x, &[gamma, beta, running_mean, running_var])?;
    let (batch, _, rows, cols) = x.dims4();
    let plane = rows * cols;
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let m = running_mean[ch].to_f64();
            let iv = 1.0 / (running_var[ch].to_f64() + eps).sqrt();
            let (g, be) = (gamma[ch], beta[ch]);
            for s in 0..plane {
                yd[off + s] = g * T::from_f64((xd[off + s].to_f64() - m) * iv) + be;
            }
        }
    }
    Ok(y)
}

/// Exact gradients of the train-phase expression. Per channel, with
/// dyh = grad_out * gamma:
///   dx = inv_std * (dyh - mean(dyh) - xhat * mean(dyh * xhat))
/// and grad_gamma = sum(grad_out * xhat), grad_beta = sum(grad_out).
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    assert_eq!(grad_out.shape(), cache.xhat.shape());
    let (batch, c, h, w) = grad_out.dims4();
    let plane = h * w;
    let n = (batch * plane) as f64;
    let gd = grad_out.data();
    let xh = cache.xhat.data();

    let mut grad_x = Tensor::zeros(grad_out.shape());
    let gx = grad_x.data_mut();
    let mut grad_gamma = Vec::with_capacity(c);
    let mut grad_beta = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let off = (b * c + ch) * plane;
            for s in 0..plane {
                let g = gd[off + s].to_f64();
                sum_dy += g;
                sum_dy_xhat += g * xh[off + s].to_f64();
            }
        }
        grad_gamma.push(T::from_f64(sum_dy_xhat));
        grad_beta.push(T::from_f64(sum_dy));

        let gam = gamma[ch].to_f64();
        let iv = cache.inv_std[ch].to_f64();
        let mean_dyh = gam * sum_dy / n;
        let mean_dyh_xhat = gam * sum_dy_xhat / n;
        for b in 0..batch {
            let off = (b * c + ch) * plane;
            for s in 0..plane {
                let dyh = gd[off + s].to_f64() * gam;
                let v = iv * (dyh - mean_dyh - xh[off + s].to_f64() * mean_dyh_xhat);
                gx[off + s] = T::from_f64(v);
            }
        }
    }
    (grad_x, grad_gamma, grad_beta)
}

/// running = momentum * running + (1 - momentum) * batch.
pub fn update_running_stats<T: Scalar>(running: &mut [T], batch: &[T], momentum: f64) {
    assert_eq!(running.len(), batch.len());
    let m = T::from_f64(momentum);
    let one_m = T::from_f64(1.0 - momentum);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = m * *r + one_m * b;
    }
}
