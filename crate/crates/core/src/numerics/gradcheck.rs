//! Central-difference gradient oracle, independent of the tape.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-coordinate central differences with step `1e-5 * max(1, |θ_j|)`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, theta: &Tensor) -> Result<Tensor> {
    let mut probe = theta.clone();
    let mut out = Tensor::zeros(theta.shape());
    for j in 0..theta.len() {
        let x = theta.data()[j];
        let step = 1e-5 * x.abs().max(1.0);
        probe.data_mut()[j] = x + step;
        let up = f(&probe);
        probe.data_mut()[j] = x - step;
        let down = f(&probe);
        probe.data_mut()[j] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite around coordinate {j}")));
        }
        out.data_mut()[j] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check(f: impl Fn(&Tensor) -> f64, theta: &Tensor, analytic: &Tensor) -> Result<f64> {
    if analytic.shape() != theta.shape() {
        return Err(Error::Dimension(format!(
            "analytic gradient shape {:?} does not match parameter shape {:?}",
            analytic.shape(),
            theta.shape()
        )));
    }
    let numeric = numeric_gradient(f, theta)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}
