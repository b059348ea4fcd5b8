//! Central finite-difference gradient verification.
//!
//! The checker perturbs one scalar entry at a time and re-evaluates the loss
//! through the forward pass only, so it is independent of every backward
//! closure it is used to verify. Run it in `f64`: `f32` cancellation noise
//! drowns the comparison.

use crate::{Scalar, Tensor};

/// Max relative error between an analytic gradient and the central
/// difference `(f(x+h) - f(x-h)) / 2h`, entry by entry.
///
/// `eval` must return the scalar loss for the supplied tensor value with
/// everything else held fixed. The relative denominator is floored at 1e-8
/// so entries whose true gradient is zero compare absolutely.
pub fn max_rel_error<T: Scalar>(
    analytic: &Tensor<T>,
    at: &Tensor<T>,
    h: f64,
    mut eval: impl FnMut(&Tensor<T>) -> f64,
) -> f64 {
    assert_eq!(analytic.shape(), at.shape(), "gradient/value shape mismatch");
    let mut worst = 0.0f64;
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe.data()[i];
        let step = T::from_f64(h);
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i].to_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum(x^2), grad = 2x
        let at = Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let analytic = at.map(|v| 2.0 * v);
        let err = max_rel_error(&analytic, &at, 1e-3, |x| {
            x.data().iter().map(|v| v * v).sum()
        });
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let at = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let wrong = at.map(|v| 3.0 * v);
        let err = max_rel_error(&wrong, &at, 1e-3, |x| {
            x.data().iter().map(|v| v * v).sum()
        });
        assert!(err > 0.1, "err {err}");
    }
}
