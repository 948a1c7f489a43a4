//! Adam optimization, mini-batch assembly from slice crops, and the training
//! loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::network::{
    backward, forward_train, init_weights, NetworkConfig, NetworkError, WeightSet, BN_MOMENTUM,
};
use crate::ops::{cross_entropy, update_running_stats, OpError};
use crate::tensor::{LabelMap, Scalar, Tensor};
use crate::volume::{Volume, AXES};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("dataset entry {index}: image dims {image:?} but label dims {labels:?}")]
    DatasetMismatch {
        index: usize,
        image: (usize, usize, usize),
        labels: (usize, usize, usize),
    },
    #[error("crop size {crop} must be an odd number no smaller than the network field {field}")]
    BadCrop { crop: usize, field: usize },
    #[error("parameter, gradient and optimizer layouts disagree")]
    GradLayout,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Op(#[from] OpError),
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments, one pair of buffers per trainable tensor. Moments are
/// kept at 64-bit regardless of parameter precision.
#[derive(Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            hyper,
        }
    }

    pub fn for_weights<T: Scalar>(hyper: AdamHyper, weights: &WeightSet<T>) -> Self {
        let sizes: Vec<usize> = weights.trainable().iter().map(|s| s.len()).collect();
        Self::new(hyper, &sizes)
    }

    /// One Adam update:
    ///   t += 1
    ///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    ///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [&mut [T]],
        grads: &[&[T]],
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::GradLayout);
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(OptimError::GradLayout);
            }
        }
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
                let update = h.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + h.eps);
                p[i] = T::from_f64(p[i].to_f64() - update);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }
}

#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub hyper: AdamHyper,
    pub dropout_rate: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            steps: 10_000,
            batch_size: 128,
            crop_size: 201,
            seed: 0,
            hyper: AdamHyper::default(),
            dropout_rate: 0.5,
        }
    }
}

/// One training case: a normalized isotropic image and its label volume,
/// matching voxel for voxel.
pub type TrainingPair = (Volume<f32>, Volume<u8>);

/// Draws `plan.batch_size` random crops. Per sample, in this order, the
/// generator picks a volume, a slice axis, a slice, then a crop origin
/// uniform over every position whose central target window intersects the
/// slice; the area outside the slice is zero-filled (background for labels),
/// mirroring the zero-padding the network sees at inference. Targets are the
/// central `target_extent` square of each crop's labels.
pub fn sample_minibatch(
    dataset: &[TrainingPair],
    plan: &TrainPlan,
    target_extent: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, LabelMap), OptimError> {
    if dataset.is_empty() {
        return Err(OptimError::EmptyDataset);
    }
    let crop = plan.crop_size;
    assert!(target_extent <= crop && (crop - target_extent) % 2 == 0);
    let offset = (crop - target_extent) / 2;

    let mut inputs = Tensor::zeros(&[plan.batch_size, 1, crop, crop]);
    let mut targets = LabelMap::filled(plan.batch_size, target_extent, target_extent, 0);
    for b in 0..plan.batch_size {
        let (image, labels) = &dataset[rng.random_range(0..dataset.len())];
        let axis = AXES[rng.random_range(0..3)];
        let slice_idx = rng.random_range(0..image.extent_along(axis));
        let (rows, cols, img_slice) = image.extract_slice(axis, slice_idx);
        let (_, _, lab_slice) = labels.extract_slice(axis, slice_idx);
        let span = (offset + target_extent) as i64;
        let r0 = rng.random_range(1 - span..=(rows as i64 - 1 - offset as i64));
        let c0 = rng.random_range(1 - span..=(cols as i64 - 1 - offset as i64));

        for rr in 0..crop {
            let sr = r0 + rr as i64;
            if sr < 0 || sr >= rows as i64 {
                continue;
            }
            for cc in 0..crop {
                let sc = c0 + cc as i64;
                if sc < 0 || sc >= cols as i64 {
                    continue;
                }
                inputs.set4(b, 0, rr, cc, img_slice[sr as usize * cols + sc as usize]);
            }
        }
        for tr in 0..target_extent {
            let sr = r0 + (offset + tr) as i64;
            if sr < 0 || sr >= rows as i64 {
                continue;
            }
            for tc in 0..target_extent {
                let sc = c0 + (offset + tc) as i64;
                if sc < 0 || sc >= cols as i64 {
                    continue;
                }
                targets.set(b, tr, tc, lab_slice[sr as usize * cols + sc as usize]);
            }
        }
    }
    Ok((inputs, targets))
}

/// Initializes a network from `plan.seed` and runs `plan.steps` iterations of
/// sample, forward, cross-entropy, backward, Adam. Returns the final weights
/// and the per-step loss log. A fixed seed reproduces the log exactly.
pub fn train(
    config: &NetworkConfig,
    dataset: &[TrainingPair],
    plan: &TrainPlan,
) -> Result<(WeightSet<f32>, Vec<(usize, f64)>), OptimError> {
    config.validate_runnable()?;
    if dataset.is_empty() {
        return Err(OptimError::EmptyDataset);
    }
    for (index, (image, labels)) in dataset.iter().enumerate() {
        if image.dims != labels.dims {
            return Err(OptimError::DatasetMismatch {
                index,
                image: image.dims,
                labels: labels.dims,
            });
        }
    }
    let field = config.min_input_extent();
    if plan.crop_size < field || plan.crop_size % 2 == 0 {
        return Err(OptimError::BadCrop {
            crop: plan.crop_size,
            field,
        });
    }
    let target_extent = plan.crop_size - (field - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut weights: WeightSet<f32> = init_weights(config, &mut rng);
    let mut adam = AdamState::for_weights(plan.hyper, &weights);
    let mut loss_log = Vec::with_capacity(plan.steps);

    for step in 1..=plan.steps {
        let (inputs, targets) = sample_minibatch(dataset, plan, target_extent, &mut rng)?;
        let (probs, cache) =
            forward_train(config, &weights, &inputs, plan.dropout_rate, &mut rng)?;
        let (loss, grad_logits) = cross_entropy(&probs, &targets)?;
        if !loss.is_finite() {
            return Err(OptimError::NonFiniteLoss { step });
        }
        let grads = backward(config, &weights, &cache, &grad_logits)?;
        {
            let grad_views = grads.trainable();
            let mut param_views = weights.trainable_mut();
            adam.step(&mut param_views, &grad_views)?;
        }
        for l in 0..config.layers.len() {
            if let Some((mean, var)) = cache.batch_stats(l) {
                let bn = weights.layers[l].bn.as_mut().unwrap();
                update_running_stats(&mut bn.running_mean, mean, BN_MOMENTUM);
                update_running_stats(&mut bn.running_var, var, BN_MOMENTUM);
            }
        }
        loss_log.push((step, loss));
    }
    Ok((weights, loss_log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_dataset() -> Vec<TrainingPair> {
        let dims = (20, 18, 6);
        let n = dims.0 * dims.1 * dims.2;
        let image = Volume::new(
            dims,
            (1.0, 1.0, 1.0),
            (0..n).map(|i| (i % 7) as f32 - 3.0).collect(),
        );
        let labels = Volume::filled(dims, (1.0, 1.0, 1.0), 0u8);
        vec![(image, labels)]
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![1.0f64, -2.0, 3.0];
        let grads = vec![0.0f64; 3];
        let mut state = AdamState::new(AdamHyper::default(), &[3]);
        state
            .step(&mut [params.as_mut_slice()], &[grads.as_slice()])
            .unwrap();
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_collapses_to_sign() {
        for &g in &[0.37f64, -1.4e3, 1e-4] {
            let mut params = vec![0.0f64];
            let mut state = AdamState::new(AdamHyper::default(), &[1]);
            state.step(&mut [params.as_mut_slice()], &[[g].as_slice()]).unwrap();
            assert!(
                (params[0] + 1e-3 * g.signum()).abs() < 1e-5,
                "g={g} moved to {}",
                params[0]
            );
        }
    }

    #[test]
    fn five_step_trajectory_matches_reference_recurrence() {
        // textbook recurrence, coded straight from the update equations
        let hyper = AdamHyper::default();
        let grad_seq = [
            vec![0.5f64, -0.3, 0.1],
            vec![0.2, 0.2, -0.9],
            vec![-0.7, 0.0, 0.4],
            vec![0.05, 1.3, -0.2],
            vec![-0.6, -0.6, 0.6],
        ];
        let mut reference = vec![0.3f64, -0.1, 0.9];
        {
            let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
            for (step, g) in grad_seq.iter().enumerate() {
                let t = (step + 1) as i32;
                for i in 0..3 {
                    m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                    v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                    let mhat = m[i] / (1.0 - hyper.beta1.powi(t));
                    let vhat = v[i] / (1.0 - hyper.beta2.powi(t));
                    reference[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
                }
            }
        }

        let mut params = vec![0.3f64, -0.1, 0.9];
        let mut state = AdamState::new(hyper, &[3]);
        for g in &grad_seq {
            state.step(&mut [params.as_mut_slice()], &[g.as_slice()]).unwrap();
        }
        for (a, b) in params.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert_eq!(state.steps_taken(), 5);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let hyper = AdamHyper {
            lr: 0.0,
            ..AdamHyper::default()
        };
        let mut params: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let orig = params.clone();
        let mut state = AdamState::new(hyper, &[16]);
        for _ in 0..10 {
            let grads: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
            state.step(&mut [params.as_mut_slice()], &[grads.as_slice()]).unwrap();
        }
        assert_eq!(params, orig);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut params = vec![0.0f64; 3];
        let grads = vec![0.0f64; 4];
        let mut state = AdamState::new(AdamHyper::default(), &[3]);
        assert!(matches!(
            state.step(&mut [params.as_mut_slice()], &[grads.as_slice()]),
            Err(OptimError::GradLayout)
        ));
    }

    #[test]
    fn minibatch_has_the_stated_voxel_count() {
        let plan = TrainPlan {
            batch_size: 128,
            crop_size: 201,
            ..TrainPlan::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let dataset = flat_dataset();
        let (inputs, targets) = sample_minibatch(&dataset, &plan, 71, &mut rng).unwrap();
        assert_eq!(inputs.shape(), &[128, 1, 201, 201]);
        assert_eq!(targets.numel(), 645_248);
    }

    #[test]
    fn background_volume_gives_background_targets() {
        let plan = TrainPlan {
            batch_size: 8,
            crop_size: 151,
            ..TrainPlan::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let (_, targets) = sample_minibatch(&flat_dataset(), &plan, 21, &mut rng).unwrap();
        assert!(targets.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn every_target_window_touches_the_slice() {
        // an all-foreground volume: any in-slice target voxel reads nonzero,
        // so each sample must contain at least one
        let dims = (20, 18, 6);
        let n = dims.0 * dims.1 * dims.2;
        let image = Volume::filled(dims, (1.0, 1.0, 1.0), 1.0f32);
        let labels = Volume::new(dims, (1.0, 1.0, 1.0), vec![1u8; n]);
        let plan = TrainPlan {
            batch_size: 64,
            crop_size: 151,
            ..TrainPlan::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let (_, targets) = sample_minibatch(&[(image, labels)], &plan, 21, &mut rng).unwrap();
        for b in 0..64 {
            let window = &targets.data[b * 441..(b + 1) * 441];
            assert!(window.iter().any(|&l| l == 1), "sample {b} is pure padding");
        }
    }

    #[test]
    fn minibatch_is_deterministic_per_seed() {
        let plan = TrainPlan {
            batch_size: 4,
            crop_size: 141,
            ..TrainPlan::default()
        };
        let dataset = flat_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let a = sample_minibatch(&dataset, &plan, 11, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let b = sample_minibatch(&dataset, &plan, 11, &mut rng).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(sample_minibatch(&[], &plan, 11, &mut rng).is_err());
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let config = NetworkConfig::with_width(2);
        let plan = TrainPlan {
            steps: 0,
            batch_size: 2,
            crop_size: 131,
            seed: 9,
            ..TrainPlan::default()
        };
        let (weights, log) = train(&config, &flat_dataset(), &plan).unwrap();
        assert!(log.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fresh: WeightSet<f32> = init_weights(&config, &mut rng);
        assert_eq!(weights, fresh);
    }

    #[test]
    fn bad_crops_are_rejected() {
        let config = NetworkConfig::with_width(2);
        let dataset = flat_dataset();
        for crop in [130, 129, 200] {
            let plan = TrainPlan {
                steps: 1,
                crop_size: crop,
                ..TrainPlan::default()
            };
            let err = train(&config, &dataset, &plan);
            if crop == 200 {
                assert!(matches!(err, Err(OptimError::BadCrop { crop: 200, .. })));
            } else {
                assert!(err.is_err());
            }
        }
    }
}
