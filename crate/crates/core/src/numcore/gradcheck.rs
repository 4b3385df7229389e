use super::{Graph, NumError, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// coordinate at which the maximum was attained
    pub worst_coordinate: usize,
}

/// Central finite-difference gradient of a scalar function.
pub fn central_difference<F>(f: F, point: &Tensor, step: f64) -> Result<Tensor, NumError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, NumError>,
{
    let eval = |p: Tensor, coordinate: usize| -> Result<f64, NumError> {
        let g = Graph::inference();
        let x = g.constant(p);
        let y = f(&g, x)?;
        let v = y.item();
        if !v.is_finite() {
            return Err(NumError::NonFinite { coordinate });
        }
        Ok(v)
    };
    let mut grad = Tensor::zeros(point.rows(), point.cols());
    for k in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[k] += step;
        let mut minus = point.clone();
        minus.data_mut()[k] -= step;
        grad.data_mut()[k] = (eval(plus, k)? - eval(minus, k)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// The error per coordinate is `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport, NumError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, NumError>,
{
    if !(step > 0.0) {
        return Err(NumError::Invalid(format!("grad_check step must be positive, got {step}")));
    }
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    if !y.item().is_finite() {
        return Err(NumError::NonFinite { coordinate: usize::MAX });
    }
    g.backward(y)?;
    let analytic = x.grad().unwrap_or_else(|| Tensor::zeros(point.rows(), point.cols()));
    let numeric = central_difference(&f, point, step)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: 0,
    };
    for (k, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if err > report.max_relative_error {
            report = GradCheckReport {
                max_relative_error: err,
                worst_coordinate: k,
            };
        }
    }
    Ok(report)
}
