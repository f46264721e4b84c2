//! Finite-difference gradient checking, used throughout the test suites.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    eps: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let hi = f(&probe);
        probe[&idx] = orig - eps;
        let lo = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Worst relative disagreement `|a − b| / (1 + max(|a|, |b|))` over all
/// coordinates. The `1 +` keeps near-zero gradients from blowing up the
/// ratio while still scaling for large ones.
pub fn max_rel_err(analytic: &ArrayD<f64>, fd: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), fd.shape(), "gradient shapes differ");
    let mut worst = 0.0f64;
    ndarray::Zip::from(analytic).and(fd).for_each(|&a, &b| {
        let err = (a - b).abs() / (1.0 + a.abs().max(b.abs()));
        if err > worst {
            worst = err;
        }
    });
    worst
}
