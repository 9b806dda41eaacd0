use crate::autodiff::ParamVector;
use crate::error::Result;
use crate::meta::{meta_grad_maml_autodiff, meta_grad_signmaml, unroll_signsgd, InnerOptimizer, Objective};

/// Largest per-coordinate relative gap between a full second-order
/// differentiation of the signSGD unroll and the first-order sign-maml
/// gradient on the same trace. Coordinates where both are zero count as 0.
pub fn collapse_check<O: Objective + ?Sized>(x: &ParamVector, objective: &O, beta: f64, m: usize) -> Result<f64> {
    let full = meta_grad_maml_autodiff(x, objective, &InnerOptimizer::signsgd(beta, m))?;
    let first = meta_grad_signmaml(&unroll_signsgd(x, objective, beta, m)?, objective)?;
    Ok(coordinate_deviation(full.grad.values(), first.grad.values()))
}

pub(crate) fn coordinate_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}
