//! Central finite-difference checking of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for double-precision checks.
pub const FD_EPS: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to rounding do not blow the ratio up.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Outcome of a check: worst relative error and where it happened.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, for every input element (or an evenly strided subset of at
/// most `max_coords` per input).
pub fn check<F>(inputs: &[Tensor], max_coords: usize, eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for idx in (0..n).step_by(step) {
            let orig = t.data()[idx];
            work[ii].data_mut()[idx] = orig + eps;
            let fp = eval(&work)?;
            work[ii].data_mut()[idx] = orig - eps;
            let fm = eval(&work)?;
            work[ii].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ii][idx];
            let e = rel_error(a, numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report = GradReport {
                    max_rel_error: e,
                    input: ii,
                    index: idx,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued node to a scalar with fixed pseudo-random weights,
/// so that every output element contributes a distinct adjoint.
pub fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| {
        let x = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
        x * 2.0 - 1.0
    });
    let wv = tape.constant(w);
    let m = tape.mul(v, wv)?;
    Ok(tape.sum(m))
}
