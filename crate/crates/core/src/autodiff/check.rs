//! Central finite-difference gradient checking.
//!
//! Used by the test suites as the independent oracle for every backward
//! implementation; kept in the library so integration tests can reach it.

use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same scalar loss from the same leaf order on
/// any tape it is given (it runs once for the analytic pass and twice per
/// perturbed element).
pub fn finite_difference_check<F>(inputs: &[Tensor], step: f64, build: F) -> FdReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let loss = build(&tape, &vars);
        tape.value(loss).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&tape, &vars);
    tape.backward(loss).expect("fd backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(&tape.shape(v)))
        })
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + step;
            let up = eval(&work);
            work[ti].data_mut()[e] = orig - step;
            let down = eval(&work);
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    FdReport {
        max_rel_err,
        checked,
    }
}
