//! Dense BFGS maximizer for smooth low-dimensional objectives.
//!
//! Maximizes f via the textbook inverse-Hessian update on −f with Armijo
//! backtracking. The objective returns `None` at points where it is not
//! finite; the line search treats those as failed trials and backtracks.

use crate::error::{Error, Result};
use crate::numeric::dot;

#[derive(Debug, Clone, Copy)]
pub(crate) struct BfgsOptions {
    /// Max-norm bound on the gradient at convergence.
    pub tol: f64,
    pub max_iter: usize,
    /// Cap on the Euclidean length of any single step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            tol: 1e-6,
            max_iter: 500,
            max_step: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsResult {
    pub x: Vec<f64>,
    /// Objective value at `x`.
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Maximize `f`, which returns (value, gradient) or `None` off-domain.
/// `x0` must be in-domain. Non-convergence is reported in the result, not
/// as an error; callers decide whether it is fatal.
pub(crate) fn maximize_bfgs(
    f: impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: &[f64],
    options: &BfgsOptions,
) -> Result<BfgsResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut value, mut grad) = f(&x).ok_or_else(|| {
        Error::NonFiniteLikelihood("objective not finite at the starting point".to_string())
    })?;

    // h approximates the inverse Hessian of −f
    let mut h = identity(n);
    let mut iterations = 0;
    while iterations < options.max_iter {
        let grad_norm = max_norm(&grad);
        if grad_norm < options.tol {
            return Ok(BfgsResult {
                x,
                value,
                grad_norm,
                iterations,
                converged: true,
            });
        }
        iterations += 1;

        // ascent direction d = H ∇f; fall back to steepest ascent when the
        // curvature state has gone bad
        let mut direction = mat_vec(&h, &grad, n);
        let mut slope = dot(&direction, &grad);
        if slope <= 0.0 || !slope.is_finite() {
            h = identity(n);
            direction = grad.clone();
            slope = dot(&grad, &grad);
        }
        let length = dot(&direction, &direction).sqrt();
        if length > options.max_step {
            let scale = options.max_step / length;
            for d in &mut direction {
                *d *= scale;
            }
            slope *= scale;
        }

        // Predicted first-order gain below the value's own roundoff floor:
        // comparisons are meaningless, the full step provably cannot move
        // the value by more than an ulp, take it.
        let floor = 1e-12 * (1.0 + value.abs());
        let mut step = 1.0;
        let mut accepted = None;
        if slope < floor {
            let candidate: Vec<f64> = x.iter().zip(&direction).map(|(a, d)| a + d).collect();
            if let Some((cv, cg)) = f(&candidate) {
                accepted = Some((candidate, cv, cg));
            }
        }
        if accepted.is_none() {
            for _ in 0..60 {
                let candidate: Vec<f64> = x
                    .iter()
                    .zip(&direction)
                    .map(|(a, d)| a + step * d)
                    .collect();
                if let Some((cv, cg)) = f(&candidate) {
                    if cv >= value + 1e-4 * step * slope {
                        accepted = Some((candidate, cv, cg));
                        break;
                    }
                }
                step *= 0.5;
            }
        }
        let Some((new_x, new_value, new_grad)) = accepted else {
            // no acceptable point at any step length: the iterate is as
            // good as the arithmetic allows
            let grad_norm = max_norm(&grad);
            return Ok(BfgsResult {
                x,
                value,
                grad_norm,
                iterations,
                converged: grad_norm < options.tol,
            });
        };

        // BFGS update on −f: s = Δx, y = −Δ∇f
        let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad.iter().zip(&new_grad).map(|(g, ng)| g - ng).collect();
        let sy = dot(&s, &y);
        let s_len = dot(&s, &s).sqrt();
        let y_len = dot(&y, &y).sqrt();
        if sy > 1e-12 * s_len * y_len {
            let rho = 1.0 / sy;
            // H ← (I − ρ s y')H(I − ρ y s') + ρ s s'
            let hy = mat_vec(&h, &y, n);
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += (1.0 + rho * yhy) * rho * s[i] * s[j]
                        - rho * (s[i] * hy[j] + hy[i] * s[j]);
                }
            }
        }
        x = new_x;
        value = new_value;
        grad = new_grad;
    }
    let grad_norm = max_norm(&grad);
    Ok(BfgsResult {
        x,
        value,
        grad_norm,
        iterations,
        converged: grad_norm < options.tol,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn maximizes_concave_quadratic() {
        // f(x) = −(x−a)'A(x−a)/2 with A = [[3,1],[1,2]]
        let a = [1.5, -2.0];
        let f = |x: &[f64]| {
            let d = [x[0] - a[0], x[1] - a[1]];
            let ad = [3.0 * d[0] + d[1], d[0] + 2.0 * d[1]];
            let value = -0.5 * (d[0] * ad[0] + d[1] * ad[1]);
            Some((value, vec![-ad[0], -ad[1]]))
        };
        let out = maximize_bfgs(f, &[0.0, 0.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert_abs_diff_eq!(out.x[0], a[0], epsilon = 1e-6);
        assert_abs_diff_eq!(out.x[1], a[1], epsilon = 1e-6);
        assert!(out.grad_norm < 1e-6);
    }

    #[test]
    fn climbs_the_rosenbrock_valley() {
        // maximize −Rosenbrock from the classic start
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let value = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let g = vec![
                2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
                -200.0 * (b - a * a),
            ];
            Some((value, g))
        };
        let out = maximize_bfgs(f, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged, "iterations {}", out.iterations);
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn respects_domain_boundaries() {
        // f(x) = log x − x, maximum at x = 1, undefined for x ≤ 0
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                None
            } else {
                Some((x[0].ln() - x[0], vec![1.0 / x[0] - 1.0]))
            }
        };
        let out = maximize_bfgs(f, &[5.0, ], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn off_domain_start_is_an_error() {
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                None
            } else {
                Some((-x[0], vec![-1.0]))
            }
        };
        assert!(matches!(
            maximize_bfgs(f, &[-1.0], &BfgsOptions::default()),
            Err(Error::NonFiniteLikelihood(_))
        ));
    }

    #[test]
    fn reports_non_convergence_without_erroring() {
        // one gradient evaluation per iteration at most: cap iterations
        let f = |x: &[f64]| Some((-(x[0] * x[0]), vec![-2.0 * x[0]]));
        let out = maximize_bfgs(
            f,
            &[1e6],
            &BfgsOptions {
                tol: 1e-12,
                max_iter: 1,
                max_step: 1.0,
            },
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
    }
}
