//! Categorical cross-entropy over softmax probabilities, averaged across the
//! voxels of the network's valid output region.

use super::OpError;
use crate::tensor::{LabelMap, Scalar, Tensor};

const PROB_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of `targets` under `probs`, plus the exact
/// gradient with respect to the pre-softmax logits, (probs - onehot) / N.
///
/// `targets` may be larger than the spatial extent of `probs`; the surplus
/// border (labels outside the valid output region) must be even per axis and
/// is ignored. Probabilities are clamped at 1e-12 before the logarithm.
pub fn cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    targets: &LabelMap,
) -> Result<(f64, Tensor<T>), OpError> {
    let (batch, k, h, w) = probs.dims4();
    assert_eq!(batch, targets.batch, "batch sizes must agree");
    let fits = targets.rows >= h
        && targets.cols >= w
        && (targets.rows - h) % 2 == 0
        && (targets.cols - w) % 2 == 0;
    if !fits {
        return Err(OpError::TargetExtent {
            th: targets.rows,
            tw: targets.cols,
            h,
            w,
        });
    }
    let (br, bc) = ((targets.rows - h) / 2, (targets.cols - w) / 2);

    let n = (batch * h * w) as f64;
    let plane = h * w;
    let pd = probs.data();
    let mut grad = Tensor::zeros(probs.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0;
    for b in 0..batch {
        for r in 0..h {
            for t in 0..w {
                let label = targets.at(b, r + br, t + bc);
                if label as usize >= k {
                    return Err(OpError::LabelOutOfRange { label, classes: k });
                }
                let base = b * k * plane + r * w + t;
                for c in 0..k {
                    let p = pd[base + c * plane].to_f64();
                    let onehot = (c == label as usize) as usize as f64;
                    gd[base + c * plane] = T::from_f64((p - onehot) / n);
                }
                let p = pd[base + label as usize * plane].to_f64();
                loss -= p.max(PROB_FLOOR).ln();
            }
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{gradcheck, softmax_channels};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_onehot_prediction_has_zero_loss() {
        // class 1 certain at both locations
        let probs = Tensor::<f64>::from_vec(
            &[1, 2, 1, 2],
            vec![0.0, 0.0, 1.0, 1.0],
        );
        let targets = LabelMap::filled(1, 1, 2, 1);
        let (loss, grad) = cross_entropy(&probs, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_three_class_loss_is_ln3() {
        let probs = Tensor::<f64>::filled(&[2, 3, 4, 4], 1.0 / 3.0);
        let targets = LabelMap::filled(2, 4, 4, 2);
        let (loss, _) = cross_entropy(&probs, &targets).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_labels_and_odd_borders() {
        let probs = Tensor::<f64>::filled(&[1, 3, 2, 2], 1.0 / 3.0);
        let bad = LabelMap::filled(1, 2, 2, 3);
        assert!(matches!(
            cross_entropy(&probs, &bad),
            Err(OpError::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let odd = LabelMap::filled(1, 3, 2, 0);
        assert!(matches!(
            cross_entropy(&probs, &odd),
            Err(OpError::TargetExtent { .. })
        ));
    }

    #[test]
    fn ignores_the_label_border() {
        // 4x4 label map around a 2x2 output: border labels are garbage and
        // must not affect the result.
        let probs = Tensor::<f64>::filled(&[1, 2, 2, 2], 0.5);
        let mut padded = LabelMap::filled(1, 4, 4, 1);
        for r in 1..3 {
            for t in 1..3 {
                padded.set(0, r, t, 0);
            }
        }
        let exact = LabelMap::filled(1, 2, 2, 0);
        let (la, _) = cross_entropy(&probs, &padded).unwrap();
        let (lb, _) = cross_entropy(&probs, &exact).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let shape = [1, 3, 4, 4];
        let n: usize = shape.iter().product();
        for _ in 0..20 {
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut targets = LabelMap::filled(1, 4, 4, 0);
            for v in targets.data.iter_mut() {
                *v = rng.random_range(0..3u8);
            }
            let zt = Tensor::from_vec(&shape, logits.clone());
            let probs = softmax_channels(&zt);
            let (_, grad) = cross_entropy(&probs, &targets).unwrap();
            let f = |z: &[f64]| {
                let p = softmax_channels(&Tensor::from_vec(&shape, z.to_vec()));
                cross_entropy(&p, &targets).unwrap().0
            };
            gradcheck::assert_matches(f, &logits, grad.data(), 1e-6, &mut rng);
        }
    }
}
