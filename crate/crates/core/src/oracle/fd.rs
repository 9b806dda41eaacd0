//! Central finite differences, including the numerical meta-gradient of an
//! unrolled inner loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::reference::{KinkProfile, ReferenceMlp};
use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::meta::{InnerOptimizer, ModelTask};

/// Instances whose unroll passes within this distance of a relu or sign
/// kink are rejected.
pub const KINK_MARGIN: f64 = 1e-6;

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate.
pub fn central_gradient<F>(mut f: F, x: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let hi = f(&probe)?;
        probe[i] = x[i] - epsilon;
        let lo = f(&probe)?;
        probe[i] = x[i];
        out.push((hi - lo) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Largest coordinate difference, relative to the larger of the two
/// infinity norms floored at 1e-6 so that all-zero vectors compare sanely.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(a).max(inf(b)).max(1e-6);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdMode {
    Coordinate,
    /// This many seeded unit directions.
    RandomDirection { count: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSpec {
    pub epsilon: f64,
    pub mode: FdMode,
}

impl FdSpec {
    pub fn coordinate(epsilon: f64) -> Self {
        FdSpec {
            epsilon,
            mode: FdMode::Coordinate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FdEstimate {
    Gradient(Vec<f64>),
    /// `(u, ⟨∇F, u⟩)` pairs.
    Directional(Vec<(Vec<f64>, f64)>),
}

/// Numerical derivative of `F(x)` = query loss after unrolling `inner` from
/// `x`, evaluated entirely with [`ReferenceMlp`].
///
/// Fails with [`Error::KinkProximity`] when the unroll from `x` passes within
/// [`KINK_MARGIN`] of a kink, or when any probe point changes which side of a
/// kink the unroll is on.
pub fn fd_meta_grad(x: &ParamVector, task: &ModelTask, inner: &InnerOptimizer, fd: FdSpec) -> Result<FdEstimate> {
    if !(fd.epsilon > 0.0 && fd.epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {}", fd.epsilon)));
    }
    inner.validate()?;
    let net = ReferenceMlp::new(task.spec.widths());
    let (s, q) = (&task.task.support, &task.task.query);
    let eval = |p: &[f64]| -> Result<(f64, KinkProfile)> {
        net.unrolled_query_loss(
            p,
            inner.kind,
            inner.beta,
            inner.steps,
            (&s.inputs, &s.targets),
            (&q.inputs, &q.targets),
        )
    };
    let (_, base) = eval(x.values())?;
    if base.margin < KINK_MARGIN {
        return Err(Error::KinkProximity { margin: base.margin });
    }
    let guarded = |p: &[f64]| -> Result<f64> {
        let (value, profile) = eval(p)?;
        if profile.pattern != base.pattern {
            return Err(Error::KinkProximity { margin: base.margin });
        }
        Ok(value)
    };
    match fd.mode {
        FdMode::Coordinate => Ok(FdEstimate::Gradient(central_gradient(guarded, x.values(), fd.epsilon)?)),
        FdMode::RandomDirection { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let mut u: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter_mut().for_each(|v| *v /= norm);
                let shifted = |sign: f64| -> Vec<f64> {
                    x.values().iter().zip(&u).map(|(a, b)| a + sign * fd.epsilon * b).collect()
                };
                let d = (guarded(&shifted(1.0))? - guarded(&shifted(-1.0))?) / (2.0 * fd.epsilon);
                out.push((u, d));
            }
            Ok(FdEstimate::Directional(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_affine_functions() {
        let g = central_gradient(|x| Ok(3.0 * x[0] - 2.0 * x[1] + 0.5), &[0.7, -4.0], 1e-3).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-10);
        assert!((g[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn error_is_second_order_in_epsilon() {
        let f = |x: &[f64]| Ok(x[0].powi(3) + x[0].sin());
        let exact = 3.0 * 0.8f64.powi(2) + 0.8f64.cos();
        let e1 = (central_gradient(f, &[0.8], 1e-2).unwrap()[0] - exact).abs();
        let e2 = (central_gradient(f, &[0.8], 5e-3).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((3.8..4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn relative_error_scaling() {
        assert_eq!(max_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }
}
