//! Finite-difference verification of tape gradients.
//!
//! These helpers rebuild the graph from scratch for every probe, so they are
//! only sensible for small tensors — which is exactly what the unit tests and
//! the `gradient_check` example use them for.

use ndarray::ArrayD;

use super::{Scalar, Tape, Var};

/// Builds a scalar-rooted graph from one input leaf. Must be pure: calling it
/// twice with the same input value must produce the same root value.
pub trait BuildFn<F: Scalar>: Fn(&Tape<F>, Var) -> Var {}
impl<F: Scalar, T: Fn(&Tape<F>, Var) -> Var> BuildFn<F> for T {}

/// Evaluate the graph once, returning the root value and the reverse-mode
/// gradient of the input.
pub fn tape_grad<F: Scalar>(x: &ArrayD<F>, build: impl BuildFn<F>) -> (F, ArrayD<F>) {
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = build(&tape, leaf);
    assert_eq!(
        tape.value(root).len(),
        1,
        "gradient checking needs a scalar root, got shape {:?}",
        tape.value(root).shape()
    );
    let grad = tape.backward(root, &[leaf])[0];
    (tape.scalar_value(root), tape.value(grad).as_ref().clone())
}

/// Central-difference gradient, probing every coordinate of `x`.
pub fn numeric_grad<F: Scalar>(x: &ArrayD<F>, eps: f64, build: impl BuildFn<F>) -> ArrayD<F> {
    let eval = |probe: &ArrayD<F>| -> F {
        let tape = Tape::new();
        let leaf = tape.leaf(probe.clone());
        tape.scalar_value(build(&tape, leaf))
    };
    let mut probe = x.clone();
    let mut grad = ArrayD::zeros(x.raw_dim());
    let h = F::cast(eps);
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = eval(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = eval(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (h + h);
    }
    grad
}

/// Largest relative disagreement between the reverse-mode and the
/// finite-difference gradient of `build` at `x`.
pub fn max_grad_error<F: Scalar>(x: &ArrayD<F>, eps: f64, build: impl BuildFn<F>) -> f64 {
    let (_, analytic) = tape_grad(x, &build);
    let numeric = numeric_grad(x, eps, &build);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let (a, n) = (a.to_f64(), n.to_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Assert that reverse-mode and finite differences agree to `1e-6` relative
/// error, using an `f64` probe step of `1e-5`. Panics with `name` on failure.
pub fn check_grad(name: &str, x: &ArrayD<f64>, build: impl BuildFn<f64>) {
    let err = max_grad_error(x, 1e-5, build);
    assert!(err < 1e-6, "gradient check `{name}` failed: max relative error {err:.3e}");
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn numeric_grad_of_square_is_two_x() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_grad(&x, 1e-5, |t: &Tape<f64>, v| t.sum_all(t.mul(v, v)));
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn check_grad_catches_a_wrong_gradient() {
        // abs has gradient sign(x); a graph whose FD gradient can't match a
        // deliberately mismatched analytic one must panic.
        let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.7]).unwrap();
        let result = std::panic::catch_unwind(|| {
            // Evaluation uses x^2 but the "gradient" path measures x^3: the
            // builder is impure on purpose, producing inconsistent probes.
            let calls = std::cell::Cell::new(0usize);
            let err = max_grad_error(&x, 1e-5, |t: &Tape<f64>, v| {
                calls.set(calls.get() + 1);
                if calls.get() == 1 {
                    t.sum_all(t.mul(t.mul(v, v), v))
                } else {
                    t.sum_all(t.mul(v, v))
                }
            });
            assert!(err < 1e-6, "gradient check `impure` failed: {err}");
        });
        assert!(result.is_err(), "mismatched gradients must be detected");
    }
}
