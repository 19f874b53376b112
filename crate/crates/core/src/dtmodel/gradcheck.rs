//! Central-difference gradient checking.

use super::params::ModelParams;

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `loss`, using the denominator `max(1, |analytic|)`.
pub fn grad_check(mut loss: impl FnMut(&ModelParams) -> f64, params: &ModelParams, analytic: &[f64], eps: f64) -> f64 {
    let base = params.flatten();
    assert_eq!(base.len(), analytic.len(), "analytic gradient length mismatch");
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        flat[i] = base[i] + eps;
        probe.unflatten(&flat).expect("same layout");
        let plus = loss(&probe);
        flat[i] = base[i] - eps;
        probe.unflatten(&flat).expect("same layout");
        let minus = loss(&probe);
        flat[i] = base[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (numeric - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Flatten per-tensor gradients in parameter order.
pub fn flatten_grads(grads: &[super::mat::Mat]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data.iter().copied()).collect()
}
