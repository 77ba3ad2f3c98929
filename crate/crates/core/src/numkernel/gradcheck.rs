use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - central| / max(1, |central|) over every entry.
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compares tape gradients of a scalar function against central differences
/// with step `h`, over every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_on(Tape::new, f, params, h)
}

/// As [`grad_check`], with a caller-supplied tape factory for the analytic pass.
pub fn grad_check_on<F, T>(make_tape: T, f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    T: Fn() -> Tape,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut tape = make_tape();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        t.value(o).item()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries: 0,
    };
    for pi in 0..params.len() {
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let central = (plus - minus) / (2.0 * h);
            let mut err = (analytic[pi].data()[e] - central).abs() / central.abs().max(1.0);
            if err.is_nan() {
                err = f64::INFINITY;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, e);
            }
            report.entries += 1;
        }
    }
    Ok(report)
}
