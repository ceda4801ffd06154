//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor index and element index of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares `analytic(params)` against central differences of `loss` with
/// step `h`, over every element of every tensor.
pub fn check(
    params: &[Tensor<f64>],
    h: f64,
    loss: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    analytic: impl Fn(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
) -> Result<GradCheckReport> {
    let grads = analytic(params)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (ti, grad) in grads.iter().enumerate() {
        for ei in 0..work[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = loss(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = loss(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((ti, ei));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
