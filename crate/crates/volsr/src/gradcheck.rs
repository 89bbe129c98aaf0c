//! Central finite-difference verification of analytic gradients.
//!
//! Double precision only; single precision does not have the headroom to
//! separate truncation error from roundoff at usable step sizes.

use crate::tensor::{grad_of, no_grad, Tensor};

/// Numeric gradient of `eval` with respect to every element of `param`,
/// by central differences. `eval` must recompute the loss from the tensor's
/// current storage contents.
pub fn fd_grad(param: &Tensor<f64>, eval: &mut impl FnMut() -> f64, step: f64) -> Vec<f64> {
    let base = param.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        param.set_data(plus);
        let f_plus = eval();
        let mut minus = base.clone();
        minus[i] -= step;
        param.set_data(minus);
        let f_minus = eval();
        out.push((f_plus - f_minus) / (2.0 * step));
    }
    param.set_data(base);
    out
}

/// Worst-case relative disagreement, floored so that near-zero pairs compare
/// absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Checks every listed parameter of a scalar loss against central
/// differences and returns the worst relative error across all of them.
pub fn check_grads(
    mut loss_fn: impl FnMut() -> Tensor<f64>,
    params: &[&Tensor<f64>],
    step: f64,
) -> f64 {
    let loss = loss_fn();
    let analytic = grad_of(&loss, params, false).expect("grad_of in check_grads");
    let mut worst = 0.0f64;
    let mut eval = || no_grad(&mut loss_fn).item();
    for (p, a) in params.iter().zip(&analytic) {
        let numeric = fd_grad(p, &mut eval, step);
        worst = worst.max(max_rel_err(&a.to_vec(), &numeric));
    }
    worst
}

/// Same check, but the finite-difference evaluations keep graph recording
/// enabled. Required when the loss itself contains an inner `grad_of`, as a
/// gradient penalty does; suppressing the graph there would silently turn
/// the inner derivative into zeros and corrupt the numeric baseline.
pub fn check_grads_graphful(
    mut loss_fn: impl FnMut() -> Tensor<f64>,
    params: &[&Tensor<f64>],
    step: f64,
) -> f64 {
    let loss = loss_fn();
    let analytic = grad_of(&loss, params, false).expect("grad_of in check_grads_graphful");
    let mut worst = 0.0f64;
    let mut eval = || loss_fn().item();
    for (p, a) in params.iter().zip(&analytic) {
        let numeric = fd_grad(p, &mut eval, step);
        worst = worst.max(max_rel_err(&a.to_vec(), &numeric));
    }
    worst
}
