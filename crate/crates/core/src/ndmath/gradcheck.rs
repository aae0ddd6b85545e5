use crate::error::{Error, Result};
use crate::ndmath::Matrix;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error used by [`grad_check`]: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central finite differences of `f` at `params`.
pub fn numeric_gradient(
    mut f: impl FnMut(&Matrix) -> f64,
    params: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    if eps <= 0.0 {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut x = params.clone();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = f(&x);
        x.data_mut()[i] = orig - eps;
        let minus = f(&x);
        x.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is non-finite when perturbing coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max relative error between `analytic_grad` and central differences of `f`.
pub fn grad_check(
    f: impl FnMut(&Matrix) -> f64,
    params: &Matrix,
    analytic_grad: &Matrix,
    eps: f64,
) -> Result<f64> {
    if params.shape() != analytic_grad.shape() {
        return Err(Error::dims("grad_check", params.shape(), analytic_grad.shape()));
    }
    let numeric = numeric_gradient(f, params, eps)?;
    Ok(analytic_grad
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Norm-wise error `|a - n| / (|a| + |n|)` over a whole tensor; robust to
/// near-zero entries where elementwise ratios measure round-off only.
pub fn grad_check_norm(
    f: impl FnMut(&Matrix) -> f64,
    params: &Matrix,
    analytic_grad: &Matrix,
    eps: f64,
) -> Result<f64> {
    if params.shape() != analytic_grad.shape() {
        return Err(Error::dims("grad_check_norm", params.shape(), analytic_grad.shape()));
    }
    let numeric = numeric_gradient(f, params, eps)?;
    let diff = analytic_grad.sub(&numeric)?.sum_squares().sqrt();
    let scale = analytic_grad.sum_squares().sqrt() + numeric.sum_squares().sqrt();
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}
