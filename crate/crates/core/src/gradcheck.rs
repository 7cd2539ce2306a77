//! Central finite differences.
//!
//! The checker is deliberately independent of the tape: it re-evaluates a
//! forward closure at perturbed inputs and nothing else, so it can serve as
//! an oracle for the backward pass. Use `f64` graphs in shadow spike mode
//! when checking spiking networks; in that mode the forward is piecewise
//! linear and central differences are exact away from the surrogate-window
//! boundaries.

use crate::scalar::Scalar;

/// Central finite-difference gradient of `f` at `at`.
pub fn finite_difference<S: Scalar>(mut f: impl FnMut(&[S]) -> S, at: &[S], eps: S) -> Vec<S> {
    let two = S::from_f64_c(2.0);
    (0..at.len())
        .map(|i| {
            let mut x = at.to_vec();
            x[i] = at[i] + eps;
            let fp = f(&x);
            x[i] = at[i] - eps;
            let fm = f(&x);
            (fp - fm) / (two * eps)
        })
        .collect()
}

/// Compare an analytic gradient against a numeric one with mixed
/// absolute/relative tolerance. Returns the first offending index.
pub fn compare<S: Scalar>(analytic: &[S], numeric: &[S], rtol: S, atol: S) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("length mismatch: {} vs {}", analytic.len(), numeric.len()));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if (a - n).abs() > atol + rtol * scale {
            return Err(format!("gradient mismatch at {i}: analytic {a} vs numeric {n}"));
        }
    }
    Ok(())
}
