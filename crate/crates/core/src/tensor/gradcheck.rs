//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates the forward closure, so it is
//! independent of every backward rule it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Relative tolerance where the analytic gradient is non-negligible.
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude an analytic entry is compared absolutely.
pub const SMALL: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Gradients of a scalar function of `inputs` computed by the tape.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// Forward value of the function, evaluated without gradients.
pub fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Compare analytic gradients with central differences for every element of
/// every input.
pub fn check<F>(f: &F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_with(f, inputs, STEP)
}

pub fn check_with<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_grads(f, inputs)?;
    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let fp = eval(f, &probe)?;
            probe[k].data_mut()[i] = orig - h;
            let fm = eval(f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            let abs = (a - numeric).abs();
            report.checked += 1;
            if a.abs() > SMALL {
                let rel = abs / a.abs().max(numeric.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= REL_TOL {
                    report.failures.push(format!("input {k}[{i}]: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
                }
            } else {
                report.max_abs_err_small = report.max_abs_err_small.max(abs);
                if abs >= ABS_TOL {
                    report.failures.push(format!("input {k}[{i}]: analytic {a:e} numeric {numeric:e} abs {abs:e}"));
                }
            }
        }
    }
    Ok(report)
}

/// Pins a closure to the higher-ranked signature the checkers expect, so its
/// argument lifetimes are inferred correctly.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}
