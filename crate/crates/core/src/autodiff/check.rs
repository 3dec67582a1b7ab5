// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`; 0 when both vanish.
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central differences.
pub fn finite_difference_check<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if tolerance <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone())?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad_data(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p)?;
        let out = f(&mut t, v)?;
        let val = t.value(out).item();
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        Ok(val)
    };
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * FD_STEP));
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let max_dev = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    let max_rel_deviation = if scale == 0.0 { 0.0 } else { max_dev / scale };
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_deviation,
        tolerance,
        passed: max_rel_deviation <= tolerance,
    })
}
