//! Central finite-difference verification of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{LabError, Result};

/// A scalar loss over a set of trainable matrices.
pub trait Objective {
    /// Trainable matrices, in a fixed order.
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    /// Records the loss on `tape`. Returns the loss node and one leaf per
    /// entry of [`Objective::params_mut`], in the same order.
    fn record(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat offset) of the worst scalar.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

/// Smallest denominator for the relative error, so exact-zero gradients
/// compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Bound on the rounding error of a central difference, in units of
/// `u·max(|L|, 1) / eps` (`u` = machine epsilon).
pub const FD_ROUNDOFF_FACTOR: f64 = 4.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_ERROR_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by [`grad_check`]. A central difference cannot
/// resolve a gradient below `FD_ROUNDOFF_FACTOR·u·max(|L|,1) / eps` in
/// absolute terms, so gradients smaller than that bound divided by `tol` are
/// compared against it instead of their own magnitude.
pub fn resolution_floor(loss: f64, eps: f64, tol: f64) -> f64 {
    let roundoff = FD_ROUNDOFF_FACTOR * f64::EPSILON * loss.abs().max(1.0) / eps;
    (roundoff / tol).max(REL_ERROR_FLOOR)
}

fn evaluate<O: Objective + ?Sized>(obj: &O) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = obj.record(&mut tape)?;
    Ok(tape.scalar(loss))
}

/// Compares every trainable scalar's tape gradient with
/// `(L(θ+eps) − L(θ−eps)) / (2 eps)`.
pub fn grad_check<O: Objective + ?Sized>(obj: &mut O, eps: f64, tol: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(LabError::config(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }

    let mut tape = Tape::new();
    let (loss, leaves) = obj.record(&mut tape)?;
    let base = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(obj.params_mut())
        .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let again = evaluate(obj)?;
    if again.to_bits() != base.to_bits() {
        return Err(LabError::Compute(format!(
            "non-deterministic loss: {base} then {again}"
        )));
    }

    let floor = resolution_floor(base, eps, tol);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tol,
        passed: true,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for (k, g) in grad.iter().enumerate() {
            let original = obj.params_mut()[pi].data()[k];
            obj.params_mut()[pi].data_mut()[k] = original + eps;
            let plus = evaluate(obj);
            obj.params_mut()[pi].data_mut()[k] = original - eps;
            let minus = evaluate(obj);
            obj.params_mut()[pi].data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);

            let rel = relative_error_with_floor(*g, numeric, floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((g - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((pi, k));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
