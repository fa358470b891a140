//! Central finite-difference gradient oracle.
//!
//! Evaluates the target function twice per coordinate and never touches the
//! reverse-mode path, so it can sit in judgment over it.

use super::{Scalar, Tensor};

/// Central-difference gradient of `f` at `x`: (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps).
///
/// `f` must be deterministic. Use `f64` and `eps` around 1e-5 when checking
/// analytic gradients.
pub fn finite_difference_gradient<F: Scalar>(
    f: impl Fn(&Tensor<F>) -> F,
    x: &Tensor<F>,
    eps: f64,
) -> Tensor<F> {
    assert!(eps > 0.0, "eps must be positive");
    let e = F::from_f64(eps);
    let two = F::from_f64(2.0);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + e;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - e;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (two * e));
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Largest relative elementwise deviation between two gradients, with an
/// absolute floor so near-zero entries compare sanely.
pub fn max_relative_error<F: Scalar>(analytic: &Tensor<F>, numeric: &Tensor<F>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let a = a.as_f64();
        let n = n.as_f64();
        let denom = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
