//! Central finite-difference verification of backward rules. Everything here
//! runs at 64-bit precision; the step below keeps the truncation and
//! round-off error of the two-point stencil several orders below the
//! tolerances used by the tests.

use rand::Rng;

pub const STEP: f64 = 1e-5;

/// Relative disagreement |a - n| / max(|a|, |n|, floor). The floor keeps
/// round-off on near-zero coordinates from registering as disagreement.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// d f / d x_i by central differences.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let up = f(&probe);
    probe[i] = x[i] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` at `x`, probing every coordinate up to 48 and a random subset
/// beyond that.
pub fn max_rel_err(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    rng: &mut impl Rng,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe_one = |i: usize, worst: &mut f64| {
        let numeric = central_diff(&mut f, x, i, STEP);
        *worst = worst.max(rel_err(analytic[i], numeric));
    };
    if x.len() <= 48 {
        for i in 0..x.len() {
            probe_one(i, &mut worst);
        }
    } else {
        for _ in 0..48 {
            probe_one(rng.random_range(0..x.len()), &mut worst);
        }
    }
    worst
}

/// Panics if any probed coordinate disagrees with finite differences by more
/// than `tol` relative.
pub fn assert_matches(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tol: f64,
    rng: &mut impl Rng,
) {
    let worst = max_rel_err(f, x, analytic, rng);
    assert!(
        worst <= tol,
        "analytic gradient disagrees with finite differences: max rel err {worst:.3e} > {tol:.0e}"
    );
}
