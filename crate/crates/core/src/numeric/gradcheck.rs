//! Finite-difference verification of tape gradients.

use crate::error::{HapError, Result};
use crate::numeric::tape::{Tape, Var};
use crate::params::{GradBuffer, ParamId, ParamStore};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient components are compared absolutely rather
/// than relatively; central differences cannot resolve values this small.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// A scalar-valued computation over a parameter store.
pub trait DifferentiableProgram {
    fn params(&self) -> &ParamStore;

    /// Record the computation on `tape` using the values in `params` and
    /// return the scalar output node.
    fn build(&self, tape: &mut Tape, params: &ParamStore) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckWorst {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub elements_checked: usize,
    pub worst: Option<GradCheckWorst>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Analytic gradient of the program's output for every parameter.
pub fn analytic_gradient(program: &dyn DifferentiableProgram) -> Result<(f64, GradBuffer)> {
    let store = program.params();
    let mut tape = Tape::new();
    let out = program.build(&mut tape, store)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    let mut buffer = GradBuffer::zeros_like(store);
    tape.accumulate_param_grads(&grads, &mut buffer);
    Ok((value, buffer))
}

/// Central differences of `f` with respect to every element of every
/// parameter in `store`.
pub fn finite_difference(
    store: &ParamStore,
    step: f64,
    f: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradBuffer> {
    let mut out = GradBuffer::zeros_like(store);
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.tensor(id).shape().numel();
        for k in 0..n {
            let orig = store.tensor(id).data()[k];
            perturb(&mut probe, id, k, orig + step)?;
            let plus = f(&probe)?;
            perturb(&mut probe, id, k, orig - step)?;
            let minus = f(&probe)?;
            perturb(&mut probe, id, k, orig)?;
            out.get_mut(id)[k] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

fn perturb(store: &mut ParamStore, id: ParamId, k: usize, value: f64) -> Result<()> {
    store.update(id, |i, v| if i == k { value } else { v })
}

/// Compare analytic and central-difference gradients for every parameter
/// element of `program`.
pub fn gradient_check(
    program: &dyn DifferentiableProgram,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradient(program)?;
    let numeric = finite_difference(program.params(), FD_STEP, |s| {
        let mut tape = Tape::new();
        let out = program.build(&mut tape, s)?;
        tape.scalar(out)
    })?;

    let store = program.params();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        elements_checked: 0,
        worst: None,
        tolerance,
    };
    for id in store.ids() {
        for (k, (&a, &n)) in analytic.get(id).iter().zip(numeric.get(id)).enumerate() {
            if !a.is_finite() || !n.is_finite() {
                return Err(HapError::NonFinite(format!(
                    "gradient of {}",
                    store.name(id)
                )));
            }
            let err = relative_error(a, n);
            report.elements_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(GradCheckWorst {
                    param: store.name(id).to_string(),
                    element: k,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    Ok(report)
}
