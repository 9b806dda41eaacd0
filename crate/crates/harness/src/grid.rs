//! Inner learning-rate search on a grid that grows past its ends while the
//! best value sits on a boundary.

use anyhow::{bail, Result};
use serde::Serialize;

use signmaml::MetaMethod;

use crate::config::ExperimentConfig;
use crate::run;

pub const MAX_EXTENSIONS: usize = 5;
/// Points added per extension round.
const POINTS_PER_ROUND: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSearch {
    /// `(beta, score)` in evaluation order.
    pub log: Vec<(f64, f64)>,
    pub best_beta: f64,
    pub best_score: f64,
    pub extensions: usize,
    /// Set when the best value was still on a boundary after the last
    /// allowed extension.
    pub capped: bool,
}

fn best(log: &[(f64, f64)]) -> (f64, f64) {
    // Highest score; the smaller rate wins ties.
    let mut sorted = log.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted
        .into_iter()
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, (b, s)| if s > acc.1 { (b, s) } else { acc })
}

/// Evaluates `score` (higher is better) on `candidates`, then keeps adding
/// points beyond whichever end holds the best score, spaced like the two
/// outermost points on that side. Non-positive rates are never tried.
pub fn search(candidates: &[f64], max_extensions: usize, mut score: impl FnMut(f64) -> Result<f64>) -> Result<GridSearch> {
    if candidates.len() < 2 || candidates.windows(2).any(|w| w[0] >= w[1]) {
        bail!("candidates must be strictly ascending with at least two values");
    }
    if candidates[0] <= 0.0 {
        bail!("candidates must be positive");
    }
    let mut grid: Vec<f64> = candidates.to_vec();
    let mut log = Vec::new();
    for &b in &grid {
        let s = score(b)?;
        log.push((b, if s.is_nan() { f64::NEG_INFINITY } else { s }));
    }
    let mut extensions = 0;
    let mut capped = false;
    loop {
        let (b, _) = best(&log);
        let n = grid.len();
        let new: Vec<f64> = if b == grid[n - 1] {
            let step = grid[n - 1] - grid[n - 2];
            (1..=POINTS_PER_ROUND).map(|i| grid[n - 1] + step * i as f64).collect()
        } else if b == grid[0] {
            let step = grid[1] - grid[0];
            (1..=POINTS_PER_ROUND)
                .map(|i| grid[0] - step * i as f64)
                .filter(|&v| v > 0.0)
                .collect()
        } else {
            break;
        };
        if new.is_empty() {
            break;
        }
        if extensions == max_extensions {
            capped = true;
            break;
        }
        extensions += 1;
        for v in new {
            let s = score(v)?;
            log.push((v, if s.is_nan() { f64::NEG_INFINITY } else { s }));
            grid.push(v);
        }
        grid.sort_by(f64::total_cmp);
    }
    let (best_beta, best_score) = best(&log);
    Ok(GridSearch {
        log,
        best_beta,
        best_score,
        extensions,
        capped,
    })
}

/// Trains with each rate and scores it on validation tasks. A run that
/// diverges scores −∞.
pub fn grid_search_beta(cfg: &ExperimentConfig, method: MetaMethod, candidates: &[f64]) -> Result<GridSearch> {
    let base = cfg.with_method(method);
    let spec = base.model()?;
    search(candidates, MAX_EXTENSIONS, |beta| {
        let mut c = base.clone();
        c.meta.beta = beta;
        c.val_interval = 0;
        match run::train(&c, |_| {}) {
            Ok(out) => run::validation_score(&out.params, &spec, &c),
            Err(e) if e.downcast_ref::<run::TrainFailure>().is_some() => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_peak_needs_no_extension() {
        let r = search(&[0.06, 0.08, 0.1, 0.12, 0.14, 0.16], 5, |b| Ok(-(b - 0.1f64).powi(2))).unwrap();
        assert_eq!(r.best_beta, 0.1);
        assert_eq!(r.extensions, 0);
        assert_eq!(r.log.len(), 6);
        assert!(!r.capped);
    }

    #[test]
    fn increasing_score_extends_upward() {
        let r = search(&[0.06, 0.08, 0.1, 0.12, 0.14, 0.16], 5, |b| Ok(-(b - 0.19f64).powi(2))).unwrap();
        assert!(r.extensions >= 1);
        assert!((r.best_beta - 0.18).abs() < 1e-12 || (r.best_beta - 0.2).abs() < 1e-12);
        assert!(r.log.iter().any(|&(b, _)| (b - 0.18).abs() < 1e-12));
        assert!(!r.capped);
    }

    #[test]
    fn extension_stops_at_the_cap() {
        let r = search(&[1.0, 2.0], 5, |b| Ok(b)).unwrap();
        assert_eq!(r.extensions, 5);
        assert!(r.capped);
        assert_eq!(r.best_beta, 12.0);
        assert_eq!(r.log.len(), 12);
    }

    #[test]
    fn downward_extension_stays_positive() {
        let r = search(&[0.0035, 0.005, 0.0065, 0.0075, 0.01], 5, |b| Ok(-b)).unwrap();
        assert!(r.log.iter().all(|&(b, _)| b > 0.0));
        assert!(r.best_beta < 0.0035);
        assert!(!r.capped);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(search(&[0.1], 5, |_| Ok(0.0)).is_err());
        assert!(search(&[0.2, 0.1], 5, |_| Ok(0.0)).is_err());
        assert!(search(&[0.0, 0.1], 5, |_| Ok(0.0)).is_err());
    }
}
