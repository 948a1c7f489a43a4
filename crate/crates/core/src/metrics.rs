//! Overlap and surface-distance metrics between label volumes.
//!
//! Class convention throughout: 0 background, 1 myocardium, 2 blood pool.
//! Surface distances are Euclidean in millimeters; boundary points are voxel
//! centers, i.e. (index + 0.5) * spacing per axis. Nearest-point searches are
//! exhaustive, which is the reference semantics any acceleration must match.

use rayon::prelude::*;
use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("volume dims differ: {a:?} vs {b:?}")]
    DimsMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("volume spacing differs: {a:?} vs {b:?}")]
    SpacingMismatch {
        a: (f64, f64, f64),
        b: (f64, f64, f64),
    },
    #[error("surface distance undefined: {which} mask is empty")]
    EmptyMask { which: &'static str },
}

/// Metrics for one foreground class. Distances are `None` when either mask is
/// empty; the flags say which side was missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub adb_mm: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub empty_prediction: bool,
    pub empty_reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub myocardium: ClassMetrics,
    pub blood_pool: ClassMetrics,
}

impl MetricsReport {
    /// (class name, class label, metrics) rows in report order.
    pub fn rows(&self) -> [(&'static str, u8, &ClassMetrics); 2] {
        [
            ("myocardium", 1, &self.myocardium),
            ("blood_pool", 2, &self.blood_pool),
        ]
    }
}

fn check_dims<T, U>(a: &Volume<T>, b: &Volume<U>) -> Result<(), MetricsError> {
    if a.dims != b.dims {
        return Err(MetricsError::DimsMismatch {
            a: a.dims,
            b: b.dims,
        });
    }
    Ok(())
}

/// Dice overlap 2|A∩B| / (|A|+|B|) of the nonzero voxels. Two empty masks
/// overlap perfectly by convention: 1.0.
pub fn dice(a: &Volume<u8>, b: &Volume<u8>) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let mut both = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        both += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// Boundary voxels of a binary mask: inside voxels with at least one
/// 6-neighbor outside the mask or off the volume. Returned as physical
/// voxel-center coordinates in mm.
pub fn boundary_voxels(mask: &Volume<u8>) -> Vec<[f64; 3]> {
    let (nx, ny, nz) = mask.dims;
    let (sx, sy, sz) = mask.spacing;
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if mask.at(i, j, k) == 0 {
                    continue;
                }
                let exposed = i == 0
                    || i == nx - 1
                    || j == 0
                    || j == ny - 1
                    || k == 0
                    || k == nz - 1
                    || mask.at(i - 1, j, k) == 0
                    || mask.at(i + 1, j, k) == 0
                    || mask.at(i, j - 1, k) == 0
                    || mask.at(i, j + 1, k) == 0
                    || mask.at(i, j, k - 1) == 0
                    || mask.at(i, j, k + 1) == 0;
                if exposed {
                    out.push([
                        (i as f64 + 0.5) * sx,
                        (j as f64 + 0.5) * sy,
                        (k as f64 + 0.5) * sz,
                    ]);
                }
            }
        }
    }
    out
}

fn dist(p: [f64; 3], q: [f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Per-point nearest distances from `from` into `to`. `to` must be nonempty.
fn nearest_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.par_iter()
        .map(|&p| {
            to.iter()
                .map(|&q| dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn boundary_pair(
    a: &Volume<u8>,
    b: &Volume<u8>,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>), MetricsError> {
    check_dims(a, b)?;
    let pa = boundary_voxels(a);
    let pb = boundary_voxels(b);
    if pa.is_empty() {
        return Err(MetricsError::EmptyMask { which: "first" });
    }
    if pb.is_empty() {
        return Err(MetricsError::EmptyMask { which: "second" });
    }
    Ok((pa, pb))
}

/// Symmetric mean nearest-boundary distance in mm, weighted by boundary voxel
/// counts: (Σ_{p∈∂A} d(p,∂B) + Σ_{q∈∂B} d(q,∂A)) / (|∂A|+|∂B|).
pub fn avg_boundary_distance(a: &Volume<u8>, b: &Volume<u8>) -> Result<f64, MetricsError> {
    let (pa, pb) = boundary_pair(a, b)?;
    let da = nearest_distances(&pa, &pb);
    let db = nearest_distances(&pb, &pa);
    let sum: f64 = da.iter().chain(&db).sum();
    Ok(sum / (pa.len() + pb.len()) as f64)
}

/// Hausdorff distance in mm: the larger of the two directed maxima of
/// nearest-boundary distances.
pub fn hausdorff(a: &Volume<u8>, b: &Volume<u8>) -> Result<f64, MetricsError> {
    let (pa, pb) = boundary_pair(a, b)?;
    let da = nearest_distances(&pa, &pb);
    let db = nearest_distances(&pb, &pa);
    Ok(da.iter().chain(&db).fold(0.0f64, |m, &d| m.max(d)))
}

fn class_mask(labels: &Volume<u8>, class: u8) -> Volume<u8> {
    Volume::new(
        labels.dims,
        labels.spacing,
        labels.data.iter().map(|&v| (v == class) as u8).collect(),
    )
}

fn evaluate_class(pred: &Volume<u8>, reference: &Volume<u8>, class: u8) -> ClassMetrics {
    let pm = class_mask(pred, class);
    let rm = class_mask(reference, class);
    let empty_prediction = pm.data.iter().all(|&v| v == 0);
    let empty_reference = rm.data.iter().all(|&v| v == 0);
    let dice = dice(&pm, &rm).expect("same dims by construction");
    let (adb_mm, hausdorff_mm) = if empty_prediction || empty_reference {
        (None, None)
    } else {
        let (pa, pb) = boundary_pair(&pm, &rm).expect("nonempty masks");
        let da = nearest_distances(&pa, &pb);
        let db = nearest_distances(&pb, &pa);
        let sum: f64 = da.iter().chain(&db).sum();
        let max = da.iter().chain(&db).fold(0.0f64, |m, &d| m.max(d));
        (Some(sum / (pa.len() + pb.len()) as f64), Some(max))
    };
    ClassMetrics {
        dice,
        adb_mm,
        hausdorff_mm,
        empty_prediction,
        empty_reference,
    }
}

/// Full report over classes 1 (myocardium) and 2 (blood pool). Empty masks
/// set flags instead of failing; Dice is still reported (0 against a nonempty
/// counterpart, 1 when both sides are empty).
pub fn evaluate(pred: &Volume<u8>, reference: &Volume<u8>) -> Result<MetricsReport, MetricsError> {
    check_dims(pred, reference)?;
    if pred.spacing != reference.spacing {
        return Err(MetricsError::SpacingMismatch {
            a: pred.spacing,
            b: reference.spacing,
        });
    }
    Ok(MetricsReport {
        myocardium: evaluate_class(pred, reference, 1),
        blood_pool: evaluate_class(pred, reference, 2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{rotate90, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(dims: (usize, usize, usize), spacing: (f64, f64, f64), on: &[(usize, usize, usize)]) -> Volume<u8> {
        let mut m = Volume::filled(dims, spacing, 0u8);
        for &(i, j, k) in on {
            m.set(i, j, k, 1);
        }
        m
    }

    fn random_mask(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), fill: f64) -> Volume<u8> {
        let data = (0..dims.0 * dims.1 * dims.2)
            .map(|_| (rng.random::<f64>() < fill) as u8)
            .collect();
        Volume::new(dims, (1.0, 1.0, 1.0), data)
    }

    /// Independent boundary scan over explicit coordinate sets.
    fn oracle_boundary(mask: &Volume<u8>) -> Vec<[f64; 3]> {
        use std::collections::HashSet;
        let (nx, ny, nz) = mask.dims;
        let mut inside = HashSet::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if mask.at(i, j, k) != 0 {
                        inside.insert((i as i64, j as i64, k as i64));
                    }
                }
            }
        }
        let steps = [
            (1i64, 0i64, 0i64),
            (-1, 0, 0),
            (0, 1, 0),
            (0, -1, 0),
            (0, 0, 1),
            (0, 0, -1),
        ];
        let mut out = Vec::new();
        for k in 0..nz as i64 {
            for j in 0..ny as i64 {
                for i in 0..nx as i64 {
                    if !inside.contains(&(i, j, k)) {
                        continue;
                    }
                    let on_border = i == 0
                        || j == 0
                        || k == 0
                        || i == nx as i64 - 1
                        || j == ny as i64 - 1
                        || k == nz as i64 - 1;
                    let exposed = on_border
                        || steps
                            .iter()
                            .any(|&(di, dj, dk)| !inside.contains(&(i + di, j + dj, k + dk)));
                    if exposed {
                        out.push([
                            (i as f64 + 0.5) * mask.spacing.0,
                            (j as f64 + 0.5) * mask.spacing.1,
                            (k as f64 + 0.5) * mask.spacing.2,
                        ]);
                    }
                }
            }
        }
        out
    }

    /// All-pairs directed distances with plain loops.
    fn oracle_distances(a: &Volume<u8>, b: &Volume<u8>) -> Option<(f64, f64)> {
        let pa = oracle_boundary(a);
        let pb = oracle_boundary(b);
        if pa.is_empty() || pb.is_empty() {
            return None;
        }
        let mut sum = 0.0f64;
        let mut max = 0.0f64;
        for (from, to) in [(&pa, &pb), (&pb, &pa)] {
            for &p in from.iter() {
                let mut best = f64::INFINITY;
                for &q in to.iter() {
                    let d = dist(p, q);
                    if d < best {
                        best = d;
                    }
                }
                sum += best;
                if best > max {
                    max = best;
                }
            }
        }
        Some((sum / (pa.len() + pb.len()) as f64, max))
    }

    #[test]
    fn dice_closed_forms() {
        let dims = (4, 4, 4);
        let s = (1.0, 1.0, 1.0);
        let a = mask_from(dims, s, &[(0, 0, 0), (1, 0, 0)]);
        let same = a.clone();
        assert_eq!(dice(&a, &same).unwrap(), 1.0);
        let disjoint = mask_from(dims, s, &[(3, 3, 3), (2, 3, 3)]);
        assert_eq!(dice(&a, &disjoint).unwrap(), 0.0);
        let half = mask_from(dims, s, &[(1, 0, 0), (2, 2, 2)]);
        assert_eq!(dice(&a, &half).unwrap(), 0.5);
        let empty = mask_from(dims, s, &[]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn dice_rejects_dim_mismatch() {
        let a = Volume::filled((2, 2, 2), (1.0, 1.0, 1.0), 1u8);
        let b = Volume::filled((2, 2, 3), (1.0, 1.0, 1.0), 1u8);
        assert!(matches!(dice(&a, &b), Err(MetricsError::DimsMismatch { .. })));
    }

    #[test]
    fn dice_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_mask(&mut rng, (6, 5, 4), 0.3);
            let b = random_mask(&mut rng, (6, 5, 4), 0.3);
            assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }
    }

    #[test]
    fn single_voxel_is_its_own_boundary() {
        let m = mask_from((5, 5, 5), (2.0, 1.0, 0.5), &[(2, 3, 1)]);
        let pts = boundary_voxels(&m);
        assert_eq!(pts, vec![[5.0, 3.5, 0.75]]);
    }

    #[test]
    fn solid_cube_boundary_is_everything_but_the_center() {
        let mut m = Volume::filled((5, 5, 5), (1.0, 1.0, 1.0), 0u8);
        for k in 1..4 {
            for j in 1..4 {
                for i in 1..4 {
                    m.set(i, j, k, 1);
                }
            }
        }
        let pts = boundary_voxels(&m);
        assert_eq!(pts.len(), 26);
        assert!(!pts.contains(&[2.5, 2.5, 2.5]));
    }

    #[test]
    fn full_volume_mask_boundary_is_the_shell() {
        let m = Volume::filled((4, 4, 4), (1.0, 1.0, 1.0), 1u8);
        // 4^3 minus the 2^3 interior.
        assert_eq!(boundary_voxels(&m).len(), 64 - 8);
    }

    #[test]
    fn boundary_matches_neighbor_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let mut m = random_mask(&mut rng, (7, 6, 5), 0.4);
            m.spacing = (0.65, 0.8, 1.25);
            assert_eq!(boundary_voxels(&m), oracle_boundary(&m));
        }
    }

    #[test]
    fn distances_on_identical_masks_are_zero() {
        let m = mask_from((6, 6, 6), (0.7, 0.7, 1.1), &[(1, 1, 1), (2, 1, 1), (2, 2, 1)]);
        assert_eq!(avg_boundary_distance(&m, &m).unwrap(), 0.0);
        assert_eq!(hausdorff(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn point_pair_distance_is_the_gap() {
        let a = mask_from((8, 4, 4), (1.5, 1.0, 1.0), &[(1, 2, 2)]);
        let b = mask_from((8, 4, 4), (1.5, 1.0, 1.0), &[(3, 2, 2)]);
        // Two voxels apart along x at 1.5 mm spacing.
        assert!((avg_boundary_distance(&a, &b).unwrap() - 3.0).abs() < 1e-12);
        assert!((hausdorff(&a, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_picks_up_the_outlier() {
        let a = mask_from((10, 4, 4), (1.0, 1.0, 1.0), &[(2, 2, 2)]);
        let b = mask_from((10, 4, 4), (1.0, 1.0, 1.0), &[(2, 2, 2), (7, 2, 2)]);
        assert!((hausdorff(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        // ADB averages over the three boundary points instead.
        assert!((avg_boundary_distance(&a, &b).unwrap() - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_masks_are_rejected_for_distances() {
        let a = mask_from((4, 4, 4), (1.0, 1.0, 1.0), &[(1, 1, 1)]);
        let empty = mask_from((4, 4, 4), (1.0, 1.0, 1.0), &[]);
        assert!(matches!(
            avg_boundary_distance(&empty, &a),
            Err(MetricsError::EmptyMask { which: "first" })
        ));
        assert!(matches!(
            hausdorff(&a, &empty),
            Err(MetricsError::EmptyMask { which: "second" })
        ));
    }

    #[test]
    fn distances_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut nontrivial = 0;
        while nontrivial < 20 {
            let dims = (
                rng.random_range(2..=9),
                rng.random_range(2..=9),
                rng.random_range(2..=9),
            );
            let mut a = random_mask(&mut rng, dims, 0.25);
            let mut b = random_mask(&mut rng, dims, 0.25);
            let sp = (
                rng.random_range(0.4..2.0),
                rng.random_range(0.4..2.0),
                rng.random_range(0.4..2.0),
            );
            a.spacing = sp;
            b.spacing = sp;
            let Some((adb_want, hd_want)) = oracle_distances(&a, &b) else {
                continue;
            };
            nontrivial += 1;
            assert!((avg_boundary_distance(&a, &b).unwrap() - adb_want).abs() < 1e-9);
            assert!((hausdorff(&a, &b).unwrap() - hd_want).abs() < 1e-9);
        }
    }

    #[test]
    fn adb_never_exceeds_hausdorff() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let a = random_mask(&mut rng, (6, 6, 6), 0.3);
            let b = random_mask(&mut rng, (6, 6, 6), 0.3);
            let (Ok(adb), Ok(hd)) = (avg_boundary_distance(&a, &b), hausdorff(&a, &b)) else {
                continue;
            };
            assert!(adb <= hd + 1e-12);
        }
    }

    #[test]
    fn metrics_survive_right_angle_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let mut a = random_mask(&mut rng, (5, 6, 7), 0.3);
            let mut b = random_mask(&mut rng, (5, 6, 7), 0.3);
            a.spacing = (0.65, 0.65, 1.3);
            b.spacing = a.spacing;
            let (ra, rb) = (rotate90(&a, axis, 1), rotate90(&b, axis, 1));
            assert_eq!(dice(&a, &b).unwrap(), dice(&ra, &rb).unwrap());
            if let Ok(adb) = avg_boundary_distance(&a, &b) {
                assert!((adb - avg_boundary_distance(&ra, &rb).unwrap()).abs() < 1e-9);
                assert!((hausdorff(&a, &b).unwrap() - hausdorff(&ra, &rb).unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distances_scale_with_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let a = random_mask(&mut rng, (6, 6, 6), 0.3);
        let b = random_mask(&mut rng, (6, 6, 6), 0.3);
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.spacing = (2.0, 2.0, 2.0);
        b2.spacing = (2.0, 2.0, 2.0);
        assert_eq!(dice(&a, &b).unwrap(), dice(&a2, &b2).unwrap());
        let adb = avg_boundary_distance(&a, &b).unwrap();
        assert!((avg_boundary_distance(&a2, &b2).unwrap() - 2.0 * adb).abs() < 1e-9);
        let hd = hausdorff(&a, &b).unwrap();
        assert!((hausdorff(&a2, &b2).unwrap() - 2.0 * hd).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_reports_ones_and_zeros() {
        let mut labels = Volume::filled((6, 6, 6), (1.0, 1.0, 1.0), 0u8);
        for i in 1..4 {
            labels.set(i, 2, 2, 2);
            labels.set(i, 3, 2, 1);
        }
        let report = evaluate(&labels, &labels).unwrap();
        for (_, _, m) in report.rows() {
            assert_eq!(m.dice, 1.0);
            assert_eq!(m.adb_mm, Some(0.0));
            assert_eq!(m.hausdorff_mm, Some(0.0));
            assert!(!m.empty_prediction && !m.empty_reference);
        }
    }

    #[test]
    fn vacuous_prediction_sets_flags() {
        let mut reference = Volume::filled((5, 5, 5), (1.0, 1.0, 1.0), 0u8);
        reference.set(2, 2, 2, 2);
        reference.set(3, 2, 2, 1);
        let pred = Volume::filled((5, 5, 5), (1.0, 1.0, 1.0), 0u8);
        let report = evaluate(&pred, &reference).unwrap();
        for (_, _, m) in report.rows() {
            assert_eq!(m.dice, 0.0);
            assert!(m.empty_prediction);
            assert!(!m.empty_reference);
            assert_eq!(m.adb_mm, None);
            assert_eq!(m.hausdorff_mm, None);
        }
        // Both sides empty for a class: Dice 1, both flags set.
        let none = Volume::filled((5, 5, 5), (1.0, 1.0, 1.0), 0u8);
        let report = evaluate(&none, &none).unwrap();
        assert_eq!(report.myocardium.dice, 1.0);
        assert!(report.myocardium.empty_prediction && report.myocardium.empty_reference);
    }

    #[test]
    fn evaluate_matches_per_metric_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..10 {
            let dims = (6, 5, 7);
            let draw = |rng: &mut ChaCha8Rng| {
                let data = (0..dims.0 * dims.1 * dims.2)
                    .map(|_| rng.random_range(0..3u8))
                    .collect();
                Volume::new(dims, (0.9, 1.1, 1.3), data)
            };
            let pred = draw(&mut rng);
            let reference = draw(&mut rng);
            let report = evaluate(&pred, &reference).unwrap();
            for (_, class, m) in report.rows() {
                let pm = class_mask(&pred, class);
                let rm = class_mask(&reference, class);
                assert_eq!(m.dice, dice(&pm, &rm).unwrap());
                match avg_boundary_distance(&pm, &rm) {
                    Ok(adb) => {
                        assert_eq!(m.adb_mm, Some(adb));
                        assert_eq!(m.hausdorff_mm, Some(hausdorff(&pm, &rm).unwrap()));
                    }
                    Err(_) => {
                        assert_eq!(m.adb_mm, None);
                        assert!(m.empty_prediction || m.empty_reference);
                    }
                }
            }
        }
    }

    #[test]
    fn evaluate_rejects_spacing_mismatch() {
        let a = Volume::filled((3, 3, 3), (1.0, 1.0, 1.0), 0u8);
        let b = Volume::filled((3, 3, 3), (1.0, 1.0, 2.0), 0u8);
        assert!(matches!(
            evaluate(&a, &b),
            Err(MetricsError::SpacingMismatch { .. })
        ));
    }
}
