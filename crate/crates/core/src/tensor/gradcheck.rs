//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the backward pass, so it serves as an
//! independent oracle for everything the tape differentiates.

use crate::error::Result;

/// Central-difference gradient of a scalar function at `x0`.
pub fn finite_diff_grad<F>(x0: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + step;
        let up = f(&x)?;
        x[i] = x0[i] - step;
        let down = f(&x)?;
        x[i] = x0[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// max_i |a_i - n_i| / max(1, |n_i|).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
