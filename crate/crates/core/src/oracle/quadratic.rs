//! Closed-form meta-gradient of the quadratic/linear bilevel problem.

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

/// `(I − βA)ᵐ g` by repeated multiplication, for row-major symmetric `a`.
///
/// With support loss `½ (y − c)ᵀ A (y − c)` and query loss `gᵀ y`, every
/// inner Hessian equals `A`, so this is the exact meta-gradient. `c` does
/// not enter.
pub fn quadratic_bilevel_oracle(a: &[f64], c: &[f64], g: &[f64], beta: f64, m: usize) -> Result<ParamVector> {
    let n = g.len();
    if a.len() != n * n || c.len() != n {
        return Err(Error::Dimension {
            op: "quadratic_bilevel_oracle",
            lhs: vec![a.len(), c.len()],
            rhs: vec![n],
        });
    }
    for i in 0..n {
        for j in 0..i {
            if a[i * n + j] != a[j * n + i] {
                return Err(Error::Contract(format!(
                    "A is not symmetric at ({i}, {j}): {} vs {}",
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
        }
    }
    let mut v = g.to_vec();
    for _ in 0..m {
        let mut next = v.clone();
        for i in 0..n {
            let mut av = 0.0;
            for j in 0..n {
                av += a[i * n + j] * v[j];
            }
            next[i] -= beta * av;
        }
        v = next;
    }
    ParamVector::flatten(vec![("y".into(), vec![n, 1], v)])
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: [f64; 4] = [2.0, 1.0, 1.0, 3.0];

    #[test]
    fn trivial_exponents_and_rates() {
        let g = [1.0, -2.0];
        assert_eq!(quadratic_bilevel_oracle(&A, &[0.0; 2], &g, 0.1, 0).unwrap().values(), &g);
        assert_eq!(quadratic_bilevel_oracle(&A, &[0.0; 2], &g, 0.0, 4).unwrap().values(), &g);
    }

    #[test]
    fn two_by_two_by_hand() {
        // I − 0.1A = [[0.8, −0.1], [−0.1, 0.7]]; times e₁ = [0.8, −0.1];
        // again = [0.64 + 0.01, −0.08 − 0.07] = [0.65, −0.15]
        let v = quadratic_bilevel_oracle(&A, &[0.0; 2], &[1.0, 0.0], 0.1, 2).unwrap();
        assert!((v.values()[0] - 0.65).abs() < 1e-15);
        assert!((v.values()[1] + 0.15).abs() < 1e-15);
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        let r = quadratic_bilevel_oracle(&[2.0, 1.0, 0.0, 3.0], &[0.0; 2], &[1.0, 0.0], 0.1, 1);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
