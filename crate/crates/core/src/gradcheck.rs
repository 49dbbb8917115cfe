//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

/// Maximum over every parameter scalar of
/// `|analytic - (f(p+eps) - f(p-eps)) / (2 eps)| / (|analytic| + 1e-8)`.
///
/// `forward` must be a pure function of the parameters; two identical calls
/// that disagree are reported as a contract error.
pub fn finite_diff_check<F>(forward: F, params: &ParamSet, analytic: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Dimension {
            op: "finite_diff_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let base = forward(params)?;
    let again = forward(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "forward is not deterministic: {base} vs {again}"
        )));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != params.values()[i].shape() {
            return Err(Error::Dimension {
                op: "finite_diff_check",
                lhs: params.values()[i].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for k in 0..grad.numel() {
            let orig = params.values()[i].data()[k];
            probe.values_mut()[i].data_mut()[k] = orig + eps;
            let up = forward(&probe)?;
            probe.values_mut()[i].data_mut()[k] = orig - eps;
            let down = forward(&probe)?;
            probe.values_mut()[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
