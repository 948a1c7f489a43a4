//! Whole-volume segmentation: slice-wise prediction over the three orthogonal
//! planes with zero-padding, per-class probability fusion, back-resampling to
//! the original grid, argmax labeling, and largest-component filtering.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::network::{forward_infer, NetworkConfig, NetworkError, WeightSet};
use crate::tensor::Tensor;
use crate::volume::{
    normalize_intensity, resample_to_grid, resample_trilinear, Axis, Volume, VolumeError, AXES,
};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("network outputs {got} classes, segmentation needs 3")]
    WrongClassCount { got: usize },
    #[error("ensemble needs at least 2 probability maps, got {got}")]
    TooFewMaps { got: usize },
    #[error("class index {class} out of range for 3 classes")]
    BadClass { class: usize },
    #[error("probability map dims differ: {a:?} vs {b:?}")]
    MapDims {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
}

/// Outcome of `fuse_and_segment`. Everything lives on the original grid;
/// `per_plane_probs` keeps the intermediate per-axis maps on the isotropic
/// grid, indexed as `[axis in AXES order][class]`.
#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub labels: Volume<u8>,
    pub class_probs: [Volume<f32>; 3],
    pub per_plane_probs: Option<[[Volume<f32>; 3]; 3]>,
    pub timing_seconds: f64,
}

/// Segment every slice of `v` orthogonal to `axis` and stack the per-slice
/// class probabilities into volumes. Each slice is zero-padded on all four
/// sides by (receptive field - 1)/2 so the valid-convolution output matches
/// the slice extent.
pub fn predict_plane(
    config: &NetworkConfig,
    weights: &WeightSet<f32>,
    v: &Volume<f32>,
    axis: Axis,
) -> Result<[Volume<f32>; 3], InferenceError> {
    config.validate_runnable()?;
    if config.num_classes != 3 {
        return Err(InferenceError::WrongClassCount {
            got: config.num_classes,
        });
    }
    let field = config.min_input_extent();
    let pad = (field - 1) / 2;
    let n = v.extent_along(axis);

    let slices: Vec<Tensor<f32>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let (rows, cols, data) = v.extract_slice(axis, idx);
            let (ph, pw) = (rows + 2 * pad, cols + 2 * pad);
            let mut input = Tensor::zeros(&[1, 1, ph, pw]);
            for r in 0..rows {
                let dst = (pad + r) * pw + pad;
                input.data_mut()[dst..dst + cols].copy_from_slice(&data[r * cols..(r + 1) * cols]);
            }
            forward_infer(config, weights, &input)
        })
        .collect::<Result<_, _>>()?;

    let mut out = [(); 3].map(|_| Volume::filled(v.dims, v.spacing, 0.0f32));
    for (idx, probs) in slices.iter().enumerate() {
        // Padding exactly cancels the receptive-field loss, so each class
        // plane already has the slice's extent; insert_slice checks lengths.
        for (class, vol) in out.iter_mut().enumerate() {
            vol.insert_slice(axis, idx, probs.plane(0, class));
        }
    }
    Ok(out)
}

/// Largest 6-connected component of a binary mask; everything else is
/// cleared. Size ties keep the component whose first voxel in (z,y,x) scan
/// order comes first. An empty mask passes through empty.
pub fn largest_component(mask: &Volume<u8>) -> Volume<u8> {
    let (nx, ny, nz) = mask.dims;
    let numel = mask.numel();
    // 0 = background, otherwise component id + 1 in discovery order.
    let mut comp = vec![0u32; numel];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let seed = mask.index(i, j, k);
                if mask.data[seed] == 0 || comp[seed] != 0 {
                    continue;
                }
                let id = sizes.len() as u32 + 1;
                let mut count = 0usize;
                comp[seed] = id;
                stack.push(seed);
                while let Some(idx) = stack.pop() {
                    count += 1;
                    let i = idx % nx;
                    let j = (idx / nx) % ny;
                    let k = idx / (nx * ny);
                    let mut visit = |ii: usize, jj: usize, kk: usize| {
                        let nidx = mask.index(ii, jj, kk);
                        if mask.data[nidx] != 0 && comp[nidx] == 0 {
                            comp[nidx] = id;
                            stack.push(nidx);
                        }
                    };
                    if i > 0 {
                        visit(i - 1, j, k);
                    }
                    if i + 1 < nx {
                        visit(i + 1, j, k);
                    }
                    if j > 0 {
                        visit(i, j - 1, k);
                    }
                    if j + 1 < ny {
                        visit(i, j + 1, k);
                    }
                    if k > 0 {
                        visit(i, j, k - 1);
                    }
                    if k + 1 < nz {
                        visit(i, j, k + 1);
                    }
                }
                sizes.push(count);
            }
        }
    }
    let winner = match sizes
        .iter()
        .enumerate()
        // max_by_key returns the last maximum; invert the index to keep the
        // earliest-discovered component on ties.
        .max_by_key(|&(i, &s)| (s, usize::MAX - i))
    {
        Some((i, _)) => i as u32 + 1,
        None => return mask.clone(),
    };
    let data = comp.iter().map(|&c| (c == winner) as u8).collect();
    Volume::new(mask.dims, mask.spacing, data)
}

/// Full pipeline: normalize, resample to the smallest voxel dimension
/// isotropically, predict along all three planes, average the class maps,
/// resample each back to the original grid, argmax (ties toward the lower
/// class), and keep only the largest component of each foreground class.
pub fn fuse_and_segment(
    config: &NetworkConfig,
    weights: &WeightSet<f32>,
    original: &Volume<f32>,
) -> Result<SegmentationResult, InferenceError> {
    let start = Instant::now();
    let normalized = normalize_intensity(original)?;
    let iso = original.spacing.0.min(original.spacing.1).min(original.spacing.2);
    let isotropic = resample_trilinear(&normalized, (iso, iso, iso));

    let mut per_plane: Vec<[Volume<f32>; 3]> = Vec::with_capacity(3);
    for axis in AXES {
        per_plane.push(predict_plane(config, weights, &isotropic, axis)?);
    }

    let fused: [Volume<f32>; 3] = [0, 1, 2].map(|class| {
        let mut acc = per_plane[0][class].clone();
        for maps in &per_plane[1..] {
            for (a, &b) in acc.data.iter_mut().zip(&maps[class].data) {
                *a += b;
            }
        }
        for a in acc.data.iter_mut() {
            *a /= 3.0;
        }
        acc
    });

    let class_probs = [0, 1, 2].map(|class| {
        resample_to_grid(&fused[class], original.dims, original.spacing)
    });

    let mut labels = Volume::filled(original.dims, original.spacing, 0u8);
    for idx in 0..labels.numel() {
        let mut best = 0u8;
        let mut best_p = class_probs[0].data[idx];
        for class in 1..3u8 {
            let p = class_probs[class as usize].data[idx];
            if p > best_p {
                best = class;
                best_p = p;
            }
        }
        labels.data[idx] = best;
    }

    for class in [1u8, 2u8] {
        let mask = Volume::new(
            labels.dims,
            labels.spacing,
            labels.data.iter().map(|&v| (v == class) as u8).collect(),
        );
        let kept = largest_component(&mask);
        for idx in 0..labels.numel() {
            if mask.data[idx] != 0 && kept.data[idx] == 0 {
                labels.data[idx] = 0;
            }
        }
    }

    let per_plane_probs = {
        let mut it = per_plane.into_iter();
        Some([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ])
    };

    Ok(SegmentationResult {
        labels,
        class_probs,
        per_plane_probs,
        timing_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Voxelwise population standard deviation of one class's probability across
/// models. `maps[m]` holds model m's three class maps.
pub fn ensemble_std(
    maps: &[[Volume<f32>; 3]],
    class: usize,
) -> Result<Volume<f32>, InferenceError> {
    if maps.len() < 2 {
        return Err(InferenceError::TooFewMaps { got: maps.len() });
    }
    if class >= 3 {
        return Err(InferenceError::BadClass { class });
    }
    let first = &maps[0][class];
    for m in maps.iter() {
        if m[class].dims != first.dims {
            return Err(InferenceError::MapDims {
                a: first.dims,
                b: m[class].dims,
            });
        }
    }
    let n = maps.len() as f64;
    let mut out = Volume::filled(first.dims, first.spacing, 0.0f32);
    for idx in 0..out.numel() {
        let mean: f64 = maps.iter().map(|m| m[class].data[idx] as f64).sum::<f64>() / n;
        let var: f64 = maps
            .iter()
            .map(|m| {
                let d = m[class].data[idx] as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        out.data[idx] = var.sqrt() as f32;
    }
    Ok(out)
}
