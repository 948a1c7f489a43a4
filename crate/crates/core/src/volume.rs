//! Volumetric data and preprocessing: intensity standardization, trilinear
//! and nearest-neighbor resampling on a corner-aligned grid, and right-angle
//! rotations.
//!
//! Geometry convention throughout: voxel `i` along an axis with spacing `s`
//! has its center at physical position `(i + 0.5) * s`, so a resample target
//! position `p` reads source coordinate `p / s - 0.5`. Samples falling
//! outside the grid clamp to the nearest border voxel.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume intensity is constant; cannot standardize")]
    ConstantVolume,
}

/// Axis names follow the storage order: x is the fastest-varying index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

pub const AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

/// A 3D grid of voxels. `f32` holds image intensities or class
/// probabilities, `u8` holds class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub dims: (usize, usize, usize),
    /// Millimeters per voxel along (x, y, z).
    pub spacing: (f64, f64, f64),
    /// x-fastest: element (i, j, k) lives at (k * ny + j) * nx + i.
    pub data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), data: Vec<T>) -> Self {
        assert!(dims.0 > 0 && dims.1 > 0 && dims.2 > 0, "extents must be positive");
        assert_eq!(dims.0 * dims.1 * dims.2, data.len(), "dims/data mismatch");
        assert!(
            spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0,
            "spacing must be positive"
        );
        Volume {
            dims,
            spacing,
            data,
        }
    }

    pub fn filled(dims: (usize, usize, usize), spacing: (f64, f64, f64), value: T) -> Self {
        Volume::new(dims, spacing, vec![value; dims.0 * dims.1 * dims.2])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims.1 + j) * self.dims.0 + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Number of slices perpendicular to `axis`.
    pub fn extent_along(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.dims.0,
            Axis::Y => self.dims.1,
            Axis::Z => self.dims.2,
        }
    }

    /// 2D slice perpendicular to `axis` as (rows, cols, row-major data).
    /// Row/column assignment: z slices are (y, x); y slices are (z, x);
    /// x slices are (z, y).
    pub fn extract_slice(&self, axis: Axis, idx: usize) -> (usize, usize, Vec<T>) {
        let (nx, ny, nz) = self.dims;
        match axis {
            Axis::Z => {
                let mut out = Vec::with_capacity(ny * nx);
                for j in 0..ny {
                    for i in 0..nx {
                        out.push(self.at(i, j, idx));
                    }
                }
                (ny, nx, out)
            }
            Axis::Y => {
                let mut out = Vec::with_capacity(nz * nx);
                for k in 0..nz {
                    for i in 0..nx {
                        out.push(self.at(i, idx, k));
                    }
                }
                (nz, nx, out)
            }
            Axis::X => {
                let mut out = Vec::with_capacity(nz * ny);
                for k in 0..nz {
                    for j in 0..ny {
                        out.push(self.at(idx, j, k));
                    }
                }
                (nz, ny, out)
            }
        }
    }

    /// Writes a slice back under the same row/column convention as
    /// [`extract_slice`].
    pub fn insert_slice(&mut self, axis: Axis, idx: usize, slice: &[T]) {
        let (nx, ny, nz) = self.dims;
        match axis {
            Axis::Z => {
                assert_eq!(slice.len(), ny * nx);
                for j in 0..ny {
                    for i in 0..nx {
                        self.set(i, j, idx, slice[j * nx + i]);
                    }
                }
            }
            Axis::Y => {
                assert_eq!(slice.len(), nz * nx);
                for k in 0..nz {
                    for i in 0..nx {
                        self.set(i, idx, k, slice[k * nx + i]);
                    }
                }
            }
            Axis::X => {
                assert_eq!(slice.len(), nz * ny);
                for k in 0..nz {
                    for j in 0..ny {
                        self.set(idx, j, k, slice[k * ny + j]);
                    }
                }
            }
        }
    }
}

/// Standardizes to zero mean, unit population variance.
pub fn normalize_intensity(v: &Volume<f32>) -> Result<Volume<f32>, VolumeError> {
    let n = v.numel() as f64;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut sum = 0.0;
    for &x in &v.data {
        lo = lo.min(x);
        hi = hi.max(x);
        sum += x as f64;
    }
    if lo == hi {
        return Err(VolumeError::ConstantVolume);
    }
    let mean = sum / n;
    let var = v
        .data
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if var == 0.0 {
        return Err(VolumeError::ConstantVolume);
    }
    let inv = 1.0 / var.sqrt();
    Ok(Volume::new(
        v.dims,
        v.spacing,
        v.data
            .iter()
            .map(|&x| ((x as f64 - mean) * inv) as f32)
            .collect(),
    ))
}

/// Source grid coordinate of output voxel `j`. Equal spacings short-circuit
/// to the identity so same-grid resampling is bitwise exact.
#[inline]
fn src_coord(j: usize, target: f64, source: f64) -> f64 {
    if target == source {
        j as f64
    } else {
        (j as f64 + 0.5) * target / source - 0.5
    }
}

fn out_extent(n: usize, source: f64, target: f64) -> usize {
    ((n as f64 * source / target).round() as usize).max(1)
}

struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_map(n_out: usize, n_in: usize, target: f64, source: f64) -> AxisMap {
    let mut lo = Vec::with_capacity(n_out);
    let mut hi = Vec::with_capacity(n_out);
    let mut frac = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let u = src_coord(j, target, source).clamp(0.0, (n_in - 1) as f64);
        let base = u.floor();
        let i0 = base as usize;
        lo.push(i0);
        hi.push((i0 + 1).min(n_in - 1));
        frac.push(u - base);
    }
    AxisMap { lo, hi, frac }
}

fn resample_trilinear_onto(
    v: &Volume<f32>,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Volume<f32> {
    let (nx, ny, nz) = v.dims;
    let xm = axis_map(dims.0, nx, spacing.0, v.spacing.0);
    let ym = axis_map(dims.1, ny, spacing.1, v.spacing.1);
    let zm = axis_map(dims.2, nz, spacing.2, v.spacing.2);
    let mut out = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for k in 0..dims.2 {
        let (k0, k1, fz) = (zm.lo[k], zm.hi[k], zm.frac[k]);
        for j in 0..dims.1 {
            let (j0, j1, fy) = (ym.lo[j], ym.hi[j], ym.frac[j]);
            for i in 0..dims.0 {
                let (i0, i1, fx) = (xm.lo[i], xm.hi[i], xm.frac[i]);
                if fx == 0.0 && fy == 0.0 && fz == 0.0 {
                    out.push(v.at(i0, j0, k0));
                    continue;
                }
                let c = |ii: usize, jj: usize, kk: usize| v.at(ii, jj, kk) as f64;
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let x00 = lerp(c(i0, j0, k0), c(i1, j0, k0), fx);
                let x10 = lerp(c(i0, j1, k0), c(i1, j1, k0), fx);
                let x01 = lerp(c(i0, j0, k1), c(i1, j0, k1), fx);
                let x11 = lerp(c(i0, j1, k1), c(i1, j1, k1), fx);
                let y0 = lerp(x00, x10, fy);
                let y1 = lerp(x01, x11, fy);
                out.push(lerp(y0, y1, fz) as f32);
            }
        }
    }
    Volume::new(dims, spacing, out)
}

/// Trilinear resample onto the grid implied by `target` spacing; output
/// extents are round(n * spacing / target), at least 1.
pub fn resample_trilinear(v: &Volume<f32>, target: (f64, f64, f64)) -> Volume<f32> {
    let dims = (
        out_extent(v.dims.0, v.spacing.0, target.0),
        out_extent(v.dims.1, v.spacing.1, target.1),
        out_extent(v.dims.2, v.spacing.2, target.2),
    );
    resample_trilinear_onto(v, dims, target)
}

/// Trilinear resample onto an explicit grid; used to return probability maps
/// to a volume's exact original dims, which blind extent rounding cannot
/// always reproduce.
pub fn resample_to_grid(
    v: &Volume<f32>,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Volume<f32> {
    resample_trilinear_onto(v, dims, spacing)
}

/// Nearest-neighbor resample for label volumes under the same geometry as
/// [`resample_trilinear`].
pub fn resample_labels_nearest(v: &Volume<u8>, target: (f64, f64, f64)) -> Volume<u8> {
    let dims = (
        out_extent(v.dims.0, v.spacing.0, target.0),
        out_extent(v.dims.1, v.spacing.1, target.1),
        out_extent(v.dims.2, v.spacing.2, target.2),
    );
    let (nx, ny, nz) = v.dims;
    let pick = |n_in: usize, j: usize, t: f64, s: f64| -> usize {
        (src_coord(j, t, s).round().max(0.0) as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for k in 0..dims.2 {
        let kk = pick(nz, k, target.2, v.spacing.2);
        for j in 0..dims.1 {
            let jj = pick(ny, j, target.1, v.spacing.1);
            for i in 0..dims.0 {
                out.push(v.at(pick(nx, i, target.0, v.spacing.0), jj, kk));
            }
        }
    }
    Volume::new(dims, target, out)
}

/// One exact quarter turn about `axis`: a pure index permutation plus
/// reversal, no interpolation. Dims and spacing of the two rotated axes swap.
fn quarter_turn<T: Copy>(v: &Volume<T>, axis: Axis) -> Volume<T> {
    let (nx, ny, nz) = v.dims;
    let (sx, sy, sz) = v.spacing;
    match axis {
        // (x, y) plane: out(i, j, k) = in(j, ny - 1 - i, k)
        Axis::Z => {
            let dims = (ny, nx, nz);
            let mut out = Volume::new(dims, (sy, sx, sz), vec![v.data[0]; v.numel()]);
            for k in 0..nz {
                for j in 0..nx {
                    for i in 0..ny {
                        out.set(i, j, k, v.at(j, ny - 1 - i, k));
                    }
                }
            }
            out
        }
        // (y, z) plane: out(i, j, k) = in(i, k, nz - 1 - j)
        Axis::X => {
            let dims = (nx, nz, ny);
            let mut out = Volume::new(dims, (sx, sz, sy), vec![v.data[0]; v.numel()]);
            for k in 0..ny {
                for j in 0..nz {
                    for i in 0..nx {
                        out.set(i, j, k, v.at(i, k, nz - 1 - j));
                    }
                }
            }
            out
        }
        // (z, x) plane: out(i, j, k) = in(nx - 1 - k, j, i)
        Axis::Y => {
            let dims = (nz, ny, nx);
            let mut out = Volume::new(dims, (sz, sy, sx), vec![v.data[0]; v.numel()]);
            for k in 0..nx {
                for j in 0..ny {
                    for i in 0..nz {
                        out.set(i, j, k, v.at(nx - 1 - k, j, i));
                    }
                }
            }
            out
        }
    }
}

/// Right-angle rotation about `axis` by 1, 2 or 3 quarter turns.
pub fn rotate90<T: Copy>(v: &Volume<T>, axis: Axis, quarter_turns: usize) -> Volume<T> {
    assert!(
        (1..=3).contains(&quarter_turns),
        "quarter turns must be 1, 2 or 3"
    );
    let mut out = quarter_turn(v, axis);
    for _ in 1..quarter_turns {
        out = quarter_turn(&out, axis);
    }
    out
}

/// The original volume plus its nine right-angle rotations (three turns
/// about each axis), in a fixed order. Callers rotate paired label volumes
/// with the same calls.
pub fn augment_rotations<T: Copy>(v: &Volume<T>) -> Vec<Volume<T>> {
    let mut out = Vec::with_capacity(10);
    out.push(v.clone());
    for axis in AXES {
        for turns in 1..=3 {
            out.push(rotate90(v, axis, turns));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Volume<f32> {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(
            dims,
            (1.0, 1.0, 1.0),
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn normalize_two_point() {
        let v = Volume::new((2, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 2.0]);
        let n = normalize_intensity(&v).unwrap();
        assert!((n.data[0] + 1.0).abs() < 1e-6);
        assert!((n.data[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_statistics_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let v = random_volume(&mut rng, (9, 8, 7));
        let n = normalize_intensity(&v).unwrap();
        let mean: f64 = n.data.iter().map(|&x| x as f64).sum::<f64>() / n.numel() as f64;
        let var: f64 =
            n.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n.numel() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);

        let again = normalize_intensity(&n).unwrap();
        for (&a, &b) in again.data.iter().zip(&n.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_rejects_constant() {
        let v = Volume::filled((3, 3, 3), (1.0, 1.0, 1.0), 4.2f32);
        assert!(matches!(
            normalize_intensity(&v),
            Err(VolumeError::ConstantVolume)
        ));
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut v = random_volume(&mut rng, (5, 4, 3));
        v.spacing = (0.65, 0.73, 1.15);
        let r = resample_trilinear(&v, v.spacing);
        assert_eq!(r, v);
    }

    #[test]
    fn linear_midpoint_sample() {
        let v = Volume::new((2, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 10.0]);
        let r = resample_trilinear(&v, (2.0 / 3.0, 1.0, 1.0));
        // centers at 1/3, 1.0, 5/3 in source coords -1/6, 0.5, 7/6: border
        // clamp, exact midpoint, border clamp
        assert_eq!(r.dims, (3, 1, 1));
        assert_eq!(r.data[0], 0.0);
        assert!((r.data[1] - 5.0).abs() < 1e-6);
        assert_eq!(r.data[2], 10.0);
    }

    #[test]
    fn affine_fields_resample_exactly_away_from_borders() {
        // trilinear interpolation reproduces fields linear in (x, y, z)
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..10 {
            let dims = (
                rng.random_range(3..8),
                rng.random_range(3..8),
                rng.random_range(3..8),
            );
            let spacing = (
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
            );
            let (a, b, c, d) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let field = |x: f64, y: f64, z: f64| a + b * x + c * y + d * z;
            let mut v = Volume::filled(dims, spacing, 0.0f32);
            for k in 0..dims.2 {
                for j in 0..dims.1 {
                    for i in 0..dims.0 {
                        let val = field(
                            (i as f64 + 0.5) * spacing.0,
                            (j as f64 + 0.5) * spacing.1,
                            (k as f64 + 0.5) * spacing.2,
                        );
                        v.set(i, j, k, val as f32);
                    }
                }
            }
            let target = (
                rng.random_range(0.4..2.0),
                rng.random_range(0.4..2.0),
                rng.random_range(0.4..2.0),
            );
            let r = resample_trilinear(&v, target);
            for k in 0..r.dims.2 {
                for j in 0..r.dims.1 {
                    for i in 0..r.dims.0 {
                        // skip border-clamped samples; they see a flattened field
                        let inside = |n_in: usize, idx: usize, t: f64, s: f64| {
                            let u = src_coord(idx, t, s);
                            u >= 0.0 && u <= (n_in - 1) as f64
                        };
                        if !(inside(dims.0, i, target.0, spacing.0)
                            && inside(dims.1, j, target.1, spacing.1)
                            && inside(dims.2, k, target.2, spacing.2))
                        {
                            continue;
                        }
                        let want = field(
                            (i as f64 + 0.5) * target.0,
                            (j as f64 + 0.5) * target.1,
                            (k as f64 + 0.5) * target.2,
                        );
                        let got = r.at(i, j, k) as f64;
                        assert!(
                            (got - want).abs() < 1e-5,
                            "affine field not reproduced: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn down_then_up_on_smooth_field_stays_close() {
        let dims = (48, 40, 32);
        let mut v = Volume::filled(dims, (1.0, 1.0, 1.0), 0.0f32);
        for k in 0..dims.2 {
            for j in 0..dims.1 {
                for i in 0..dims.0 {
                    let val = ((i as f64) / 48.0 + (j as f64) / 40.0 + (k as f64) / 32.0) / 3.0;
                    v.set(i, j, k, val as f32);
                }
            }
        }
        let down = resample_trilinear(&v, (2.0, 2.0, 2.0));
        let up = resample_to_grid(&down, v.dims, v.spacing);
        let range = 1.0;
        let worst = v
            .data
            .iter()
            .zip(&up.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 0.02 * range, "round trip error {worst}");
    }

    #[test]
    fn nearest_labels_identity_and_content() {
        let mut v = Volume::filled((6, 5, 4), (1.0, 1.0, 1.0), 0u8);
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..3 {
                    v.set(i, j, k, 2);
                }
            }
        }
        let same = resample_labels_nearest(&v, (1.0, 1.0, 1.0));
        assert_eq!(same, v);

        let up = resample_labels_nearest(&v, (0.5, 0.5, 0.5));
        assert_eq!(up.dims, (12, 10, 8));
        let frac_in = v.data.iter().filter(|&&l| l == 2).count() as f64 / v.numel() as f64;
        let frac_up = up.data.iter().filter(|&&l| l == 2).count() as f64 / up.numel() as f64;
        assert!((frac_in - frac_up).abs() < 0.05);
        assert!(up.data.iter().all(|&l| l == 0 || l == 2));

        let empty = Volume::filled((4, 4, 4), (1.0, 1.0, 1.0), 0u8);
        let out = resample_labels_nearest(&empty, (0.7, 0.7, 0.7));
        assert!(out.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn quarter_turn_hand_example() {
        // 2x2x1 slab [[1,2],[3,4]] -> [[3,1],[4,2]] about z
        let v = Volume::new((2, 2, 1), (1.0, 1.0, 1.0), vec![1, 2, 3, 4]);
        let r = rotate90(&v, Axis::Z, 1);
        assert_eq!(r.data, vec![3, 1, 4, 2]);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let mut v = random_volume(&mut rng, (4, 3, 5));
        v.spacing = (0.5, 0.7, 1.1);
        for axis in AXES {
            let once = rotate90(&v, axis, 1);
            let back = rotate90(&once, axis, 3);
            assert_eq!(back, v);
            let twice = rotate90(&rotate90(&v, axis, 2), axis, 2);
            assert_eq!(twice, v);
        }
    }

    #[test]
    fn rotation_permutes_spacing_and_preserves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let mut v = random_volume(&mut rng, (4, 3, 5));
        v.spacing = (0.5, 0.7, 1.1);
        let r = rotate90(&v, Axis::Z, 1);
        assert_eq!(r.dims, (3, 4, 5));
        assert_eq!(r.spacing, (0.7, 0.5, 1.1));
        let mut a = v.data.clone();
        let mut b = r.data.clone();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_set_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let v = random_volume(&mut rng, (3, 4, 5));
        let set = augment_rotations(&v);
        assert_eq!(set.len(), 10);
        assert_eq!(set[0], v);
        for vol in &set {
            assert_eq!(vol.numel(), v.numel());
        }

        let cube = Volume::filled((3, 3, 3), (1.0, 1.0, 1.0), 7u8);
        let set = augment_rotations(&cube);
        for vol in &set {
            assert_eq!(*vol, cube);
        }
    }
}
