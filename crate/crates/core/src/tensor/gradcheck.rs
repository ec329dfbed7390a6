use super::{Result, Tensor, TensorError};

/// Central finite-difference check of analytic gradients.
///
/// Returns `max |analytic - (f(θ+h) - f(θ-h)) / 2h| / max(1, |analytic|)`
/// over every entry of every parameter.
pub fn grad_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::InvalidArgument(format!(
            "grad_check: step {h} outside [1e-7, 1e-3]"
        )));
    }
    if params.len() != analytic.len() {
        return Err(TensorError::InvalidArgument(
            "grad_check: parameter and gradient counts differ".into(),
        ));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "grad_check",
                lhs: params[p].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("grad_check: parameter {p} entry {i}"),
                });
            }
            let fd = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
