//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the check is independent of
//! the backward rules it validates.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that two
/// near-zero gradients compare as equal.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of `f` against central differences
/// with step `h`. `subset` restricts the check to `(input, element)` pairs.
pub fn check_gradients<F, G>(
    inputs: &[Tensor<F>],
    f: G,
    h: f64,
    floor: f64,
    subset: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Scalar,
    G: for<'t> Fn(&'t Tape<F>, &[Var<'t, F>]) -> Result<Var<'t, F>>,
{
    let analytic: Vec<Tensor<F>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |perturbed: &[Tensor<F>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item().as_f64())
    };
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let pairs = subset.unwrap_or(&all);
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for &(i, j) in pairs {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + F::lit(h);
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - F::lit(h);
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let exact = analytic[i].data()[j].as_f64();
        report.max_abs_error = report.max_abs_error.max((numeric - exact).abs());
        report.max_rel_error = report.max_rel_error.max(rel_error(exact, numeric, floor));
        report.checked += 1;
    }
    Ok(report)
}
