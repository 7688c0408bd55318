use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, SureError};

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and a central difference with step `step`.
///
/// Per coordinate the error is `|analytic - numeric| / max(1, |analytic| + |numeric|)`.
pub fn check_gradients<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(SureError::invalid(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point.clone());
        let y = f(&tape, x)?;
        tape.backward(y)?.get_or_zeros(x)
    };
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        f(&tape, x)?.value().item()
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SureError::Numeric(format!(
                "non-finite function value when perturbing coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
