//! Central finite-difference oracle for gradient checking.
//!
//! This module is test support: it never inspects the tape. It re-evaluates
//! a caller-supplied forward closure at perturbed inputs, so agreement with
//! [`crate::tape::Tape::backward`] is evidence from an independent route.
//!
//! The check accepts an analytic entry `a` against a numeric entry `n` when
//! `|a − n| ≤ atol + rtol·max(|a|, |n|)`: the relative tolerance governs
//! entries of ordinary magnitude and the small absolute floor absorbs the
//! round-off noise of central differences near zero.

use crate::tensor::Tensor;

/// Step size and tolerances for a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Central-difference step.
    pub h: f64,
    /// Relative tolerance.
    pub rtol: f64,
    /// Absolute floor for near-zero entries.
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            h: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
        }
    }
}

/// Full central-difference gradients of `f` with respect to every entry of
/// every input tensor: `(f(x+h) − f(x−h)) / 2h`.
pub fn central_diff<F>(f: &mut F, at: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(at.len());
    let mut work: Vec<Tensor<f64>> = at.to_vec();
    for ti in 0..at.len() {
        let mut g = Tensor::zeros(at[ti].shape().to_vec());
        for ei in 0..at[ti].len() {
            let orig = at[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = f(&work);
            work[ti].data_mut()[ei] = orig - h;
            let minus = f(&work);
            work[ti].data_mut()[ei] = orig;
            g.data_mut()[ei] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Compares analytic gradients against numeric ones entry by entry.
///
/// Returns the worst observed relative error on success, or a description
/// of the first failing entry.
pub fn compare(
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    tol: Tolerance,
) -> Result<f64, String> {
    assert_eq!(analytic.len(), numeric.len(), "gradient list lengths differ");
    let mut worst = 0.0f64;
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shapes differ at tensor {ti}");
        for (ei, (av, nv)) in a.data().iter().zip(n.data()).enumerate() {
            let diff = (av - nv).abs();
            let scale = av.abs().max(nv.abs());
            if diff > tol.atol + tol.rtol * scale {
                return Err(format!(
                    "gradient mismatch at tensor {ti}, entry {ei}: analytic {av:.9e} vs numeric {nv:.9e} (|diff| {diff:.3e})"
                ));
            }
            if scale > tol.atol {
                worst = worst.max(diff / scale);
            }
        }
    }
    Ok(worst)
}

/// Convenience wrapper: numeric gradients of `f` at `at` compared against
/// `analytic` under `tol`.
pub fn check<F>(
    f: &mut F,
    at: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    tol: Tolerance,
) -> Result<f64, String>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let numeric = central_diff(f, at, tol.h);
    compare(analytic, &numeric, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum(x^2) has gradient 2x.
        let at = vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0])];
        let mut f = |xs: &[Tensor<f64>]| xs[0].data().iter().map(|v| v * v).sum();
        let analytic = vec![Tensor::new(vec![3], vec![1.0, -2.0, 4.0])];
        let worst = check(&mut f, &at, &analytic, Tolerance::default()).unwrap();
        assert!(worst < 1e-4);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let at = vec![Tensor::new(vec![1], vec![1.0])];
        let mut f = |xs: &[Tensor<f64>]| xs[0].data()[0].powi(2);
        let wrong = vec![Tensor::new(vec![1], vec![3.0])]; // true grad is 2.0
        assert!(check(&mut f, &at, &wrong, Tolerance::default()).is_err());
    }
}
