//! Finite-difference utilities for verifying analytic gradients.
//!
//! Used throughout the test suites: a scalar-valued closure is probed with
//! central differences at every coordinate of a tensor and compared against
//! the gradient produced by the tape.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `at`, probing every element.
///
/// `h` is the absolute step size; `1e-5` is a good default for `f64`
/// losses of order 1.
pub fn central_diff_grad<F>(mut f: F, at: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(at.raw_dim());
    let mut probe = at.clone();
    for idx in 0..at.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Maximum relative error between two gradients.
///
/// Per element: `|a - b| / max(floor, |a|, |b|)`. The floor keeps
/// near-zero entries from dominating through rounding noise.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
