//! Central finite-difference verification of analytic gradients.

use super::Module;

/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compare the gradients accumulated by `loss_and_grad` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every trainable scalar.
///
/// `loss_and_grad` must return the loss and accumulate gradients into the
/// module's parameters; it is called with gradients zeroed.
pub fn finite_diff_check<M, F>(module: &mut M, h: f64, mut loss_and_grad: F) -> GradCheckReport
where
    M: Module,
    F: FnMut(&mut M) -> f64,
{
    module.zero_grad();
    loss_and_grad(module);
    let analytic: Vec<Vec<f64>> = module.params().iter().map(|p| p.grad.clone()).collect();

    let mut report =
        GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = module.params()[pi].value[i];
            module.params_mut()[pi].value[i] = orig + h;
            let plus = loss_and_grad(module);
            module.params_mut()[pi].value[i] = orig - h;
            let minus = loss_and_grad(module);
            module.params_mut()[pi].value[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_param = module.params()[pi].name.clone();
                report.worst_index = i;
            }
        }
    }
    module.zero_grad();
    report
}
