//! Shared helpers for integration tests: central finite differences,
//! relative-error comparison, and the reusable gradient-check suite.
#![allow(dead_code)] // each test target uses its own subset

pub mod gradsuite;

use iclbench::{RngStream, Tensor, Tensor64};

/// Central finite-difference gradient of a scalar function at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Random tensor with entries pushed away from zero by `margin`, for ops
/// with a kink at the origin (relu-family).
pub fn randn_away_from_zero(shape: Vec<usize>, margin: f64, rng: &mut RngStream) -> Tensor64 {
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| {
            let z = rng.normal_f64();
            z + margin * z.signum()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Fixed pseudo-random projection weights used to reduce an op output to a
/// scalar loss with non-uniform sensitivity.
pub fn projection(shape: &[usize], rng: &mut RngStream) -> Tensor64 {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}
