//! Numerical integration against the Normal random-effect density
//! φ(v, 0, σ²).
//!
//! All random-effect integrals in this crate go through a [`QuadratureRule`]:
//! physicists' Gauss–Hermite nodes rescaled so that
//! Σ_k w_k h(v_k) ≈ ∫ h(v) φ(v, 0, σ²) dv, exact for polynomials of degree
//! ≤ 2K−1. [`adaptive_simpson`] is an independent error-controlled
//! integrator kept for cross-checks.

use crate::error::{Error, Result};

/// Nodes and weights targeting integrals against φ(v, 0, sigma2).
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub sigma2: f64,
}

/// Default node count; gives ~1e-8 likelihood accuracy for the cluster
/// sizes in scope.
pub const DEFAULT_NODES: usize = 30;

const MAX_NODES: usize = 1000;

/// Build a Gauss–Hermite rule for ∫ h(v) φ(v, 0, sigma2) dv.
///
/// `sigma2 = 0` yields the degenerate one-node rule at 0 with weight 1.
pub fn gauss_hermite_rule(k: usize, sigma2: f64) -> Result<QuadratureRule> {
    if k == 0 || k > MAX_NODES {
        return Err(Error::InvalidNodeCount(k));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "quadrature variance must be non-negative, got {sigma2}"
        )));
    }
    if sigma2 == 0.0 {
        return Ok(QuadratureRule {
            nodes: vec![0.0],
            weights: vec![1.0],
            sigma2,
        });
    }
    let (x, w) = hermite_nodes(k);
    let scale = (2.0 * sigma2).sqrt();
    let nodes: Vec<f64> = x.iter().map(|&xi| scale * xi).collect();
    // Normalize so the constant 1 integrates to exactly 1; the raw weights
    // sum to sqrt(pi) up to roundoff.
    let total: f64 = w.iter().sum();
    let weights: Vec<f64> = w.iter().map(|&wi| wi / total).collect();
    Ok(QuadratureRule {
        nodes,
        weights,
        sigma2,
    })
}

/// Σ_k w_k h(v_k) for the given rule.
pub fn integrate<F: Fn(f64) -> f64>(rule: &QuadratureRule, h: F) -> Result<f64> {
    let mut acc = 0.0;
    for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
        let hv = h(v);
        if !hv.is_finite() {
            return Err(Error::NonFiniteIntegrand(v));
        }
        acc += w * hv;
    }
    Ok(acc)
}

/// Physicists' Gauss–Hermite nodes and weights for ∫ e^{-x²} f(x) dx.
///
/// Newton iteration on the orthonormal Hermite recurrence; roots are
/// computed for one half and mirrored so the rule is exactly symmetric.
fn hermite_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..(n + 1) / 2 {
        // initial guesses per Numerical Recipes, largest root first
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    // ascending node order
    x.reverse();
    w.reverse();
    (x, w)
}

const SIMPSON_MAX_DEPTH: u32 = 60;

/// Error-controlled recursive Simpson integration of `h` over `[lo, hi]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(h: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    assert!(lo < hi, "adaptive_simpson requires lo < hi");
    assert!(tol > 0.0, "adaptive_simpson requires tol > 0");
    let fa = h(lo);
    let fb = h(hi);
    let (m, fm, whole) = simpson_step(&h, lo, fa, hi, fb);
    simpson_recurse(&h, lo, fa, m, fm, hi, fb, whole, tol, 0)
}

fn simpson_step<F: Fn(f64) -> f64>(h: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = h(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse<F: Fn(f64) -> f64>(
    h: &F,
    a: f64,
    fa: f64,
    m: f64,
    fm: f64,
    b: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let (ml, fml, left) = simpson_step(h, a, fa, m, fm);
    let (mr, fmr, right) = simpson_step(h, m, fm, b, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth >= SIMPSON_MAX_DEPTH {
        return Err(Error::MaxDepthExceeded);
    }
    let half = tol / 2.0;
    Ok(
        simpson_recurse(h, a, fa, ml, fml, m, fm, left, half, depth + 1)?
            + simpson_recurse(h, m, fm, mr, fmr, b, fb, right, half, depth + 1)?,
    )
}

/// Normal density φ(v, 0, sigma2); used by the Simpson-side cross-checks.
pub fn normal_pdf(v: f64, sigma2: f64) -> f64 {
    let z = v * v / (2.0 * sigma2);
    (-z).exp() / (2.0 * std::f64::consts::PI * sigma2).sqrt()
}
