//! Shared test support: the 64-bit straight-line reference model,
//! finite-difference helpers, and the gradient-check harness.
#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;

/// Relative error with a small-denominator floor: tiny gradients are held to
/// an absolute 1e-5 instead of a meaningless ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub const GRAD_TOL: f64 = 1e-3;
pub const FD_H: f64 = 1e-3;

/// Central finite difference of `f` at `x` in coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += FD_H;
    let mut minus = x.to_vec();
    minus[i] -= FD_H;
    (f(&plus) - f(&minus)) / (2.0 * FD_H)
}
