//! Finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Checks at most this many evenly spaced coordinates per input.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-3,
            max_coords_per_input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences, coordinate by coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.parameter(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let stride = opts.max_coords_per_input.map_or(1, |max| n.div_ceil(max.max(1)));
        for j in (0..n).step_by(stride) {
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[j]);
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + opts.step;
            let hi = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x - opts.step;
            let lo = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (hi - lo) / (2.0 * opts.step);
            let err = relative_error(analytic, numeric, opts.floor);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
            report.coords_checked += 1;
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}
