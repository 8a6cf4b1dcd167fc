//! Marginal propensity learners: e(X) = P(Z = 1 | X).
//!
//! Two implementations of one contract: a logistic regression fit by
//! iteratively reweighted least squares, and a Nadaraya–Watson kernel
//! smoother. Predictions are clamped to [ε, 1−ε] so downstream logits and
//! integral inversions stay finite. Neither fitter adds an intercept;
//! callers append a constant column when they want one.

use crate::error::{Error, Result};
use crate::numeric::{cholesky_solve, dot, softplus};

/// Prediction clamp; keeps logit(ê) within ±13.8.
pub const PROB_EPS: f64 = 1e-6;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// 1/(1+exp(−t)); saturates to {0, 1} at extreme t without overflow.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`expit`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One training observation: covariate row and binary treatment.
pub type Observation = (Vec<f64>, u8);

pub trait PropensityLearner {
    /// Label recorded alongside cross-fitted scores.
    fn name(&self) -> &'static str;
    fn fit(&self, data: &[Observation]) -> Result<Box<dyn FittedPropensity>>;
}

pub trait FittedPropensity: Send + Sync {
    /// Probability in [ε, 1−ε].
    fn predict(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Max-norm bound on the score at convergence.
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FittedPropensity for LogisticFit {
    fn predict(&self, x: &[f64]) -> f64 {
        clamp_prob(expit(dot(x, &self.beta)))
    }
}

const BETA_BOUND: f64 = 1e3;

/// Maximum-likelihood logistic regression via IRLS with step-halving.
///
/// The design must be full column rank and both treatment levels present.
/// Step-halving makes the log-likelihood non-decreasing across iterations.
pub fn fit_logistic(data: &[Observation], options: LogisticOptions) -> Result<LogisticFit> {
    fit_logistic_monitored(data, options, |_| {})
}

/// IRLS driver with a per-iteration log-likelihood hook for tests.
pub(crate) fn fit_logistic_monitored(
    data: &[Observation],
    options: LogisticOptions,
    mut monitor: impl FnMut(f64),
) -> Result<LogisticFit> {
    let n = data.len();
    if n == 0 {
        return Err(Error::TooFewObservations { needed: 1, found: 0 });
    }
    let p = data[0].0.len();
    for (x, _) in data {
        if x.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "covariate rows of length {} and {}",
                p,
                x.len()
            )));
        }
    }
    let treated = data.iter().filter(|(_, z)| *z == 1).count();
    if treated == 0 || treated == n {
        return Err(Error::SeparationDetected(
            "all observations share one treatment level".to_string(),
        ));
    }

    let loglik_at = |beta: &[f64]| -> f64 {
        data.iter()
            .map(|(x, z)| {
                let eta = dot(x, beta);
                f64::from(*z) * eta - softplus(eta)
            })
            .sum()
    };

    let mut beta = vec![0.0; p];
    let mut loglik = loglik_at(&beta);
    monitor(loglik);
    for iter in 1..=options.max_iter {
        // score g = X'(z − p) and curvature H = X'WX, W = diag(p(1−p))
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        let mut saturated = true;
        for (x, z) in data {
            let prob = expit(dot(x, &beta));
            let resid = f64::from(*z) - prob;
            if resid.abs() > 1e-8 {
                saturated = false;
            }
            let w = (prob * (1.0 - prob)).max(1e-12);
            for a in 0..p {
                grad[a] += x[a] * resid;
                for b in 0..p {
                    hess[a * p + b] += w * x[a] * x[b];
                }
            }
        }
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < options.tol {
            return Ok(LogisticFit {
                beta,
                loglik,
                iterations: iter - 1,
                converged: true,
            });
        }
        if saturated {
            return Err(Error::SeparationDetected(
                "fitted probabilities saturated at the observed labels".to_string(),
            ));
        }
        let direction = cholesky_solve(&hess, &grad, p).ok_or(Error::RankDeficient)?;

        // When the Newton decrement g'd is below the floating-point
        // resolution of the log-likelihood, the line-search comparison is
        // pure roundoff; take the full step, whose effect on the value is
        // provably smaller than one ulp.
        let decrement = dot(&grad, &direction);
        if decrement <= 1e-11 * (1.0 + loglik.abs()) {
            for (b, d) in beta.iter_mut().zip(&direction) {
                *b += d;
            }
            monitor(loglik);
            continue;
        }

        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&direction)
                .map(|(b, d)| b + step * d)
                .collect();
            let cand_loglik = loglik_at(&candidate);
            if cand_loglik >= loglik {
                beta = candidate;
                loglik = cand_loglik;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            return Err(Error::NotConverged {
                iterations: iter,
                context: "logistic IRLS line search stalled".to_string(),
            });
        }
        monitor(loglik);
        if beta.iter().any(|b| b.abs() > BETA_BOUND) {
            return Err(Error::SeparationDetected(format!(
                "coefficient magnitude exceeded {BETA_BOUND}"
            )));
        }
    }
    Err(Error::NotConverged {
        iterations: options.max_iter,
        context: "logistic IRLS".to_string(),
    })
}

/// Logistic learner for cross-fitting. Appends a constant column (the
/// explicit intercept) before calling [`fit_logistic`] unless disabled.
#[derive(Debug, Clone, Copy)]
pub struct LogisticLearner {
    pub intercept: bool,
}

impl Default for LogisticLearner {
    fn default() -> Self {
        LogisticLearner { intercept: true }
    }
}

impl PropensityLearner for LogisticLearner {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn fit(&self, data: &[Observation]) -> Result<Box<dyn FittedPropensity>> {
        if self.intercept {
            let augmented: Vec<Observation> = data
                .iter()
                .map(|(x, z)| {
                    let mut row = x.clone();
                    row.push(1.0);
                    (row, *z)
                })
                .collect();
            let fit = fit_logistic(&augmented, LogisticOptions::default())?;
            Ok(Box::new(InterceptFit { fit }))
        } else {
            Ok(Box::new(fit_logistic(data, LogisticOptions::default())?))
        }
    }
}

struct InterceptFit {
    fit: LogisticFit,
}

impl FittedPropensity for InterceptFit {
    fn predict(&self, x: &[f64]) -> f64 {
        let p = self.fit.beta.len() - 1;
        let eta = dot(x, &self.fit.beta[..p]) + self.fit.beta[p];
        clamp_prob(expit(eta))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    /// Multiplier on the normal-reference bandwidth.
    pub bandwidth_scale: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            bandwidth_scale: 1.0,
        }
    }
}

const KERNEL_MIN_OBS: usize = 20;

/// Nadaraya–Watson smoother of treatment on covariates with a Gaussian
/// product kernel and per-coordinate normal-reference bandwidths.
#[derive(Debug, Clone, Copy, Default)]
pub struct KernelLearner {
    pub options: KernelOptions,
}

impl PropensityLearner for KernelLearner {
    fn name(&self) -> &'static str {
        "kernel"
    }

    fn fit(&self, data: &[Observation]) -> Result<Box<dyn FittedPropensity>> {
        fit_nonparametric(data, self.options).map(|f| Box::new(f) as Box<dyn FittedPropensity>)
    }
}

#[derive(Debug, Clone)]
pub struct KernelFit {
    xs: Vec<Vec<f64>>,
    zs: Vec<f64>,
    bandwidths: Vec<f64>,
}

pub fn fit_nonparametric(data: &[Observation], options: KernelOptions) -> Result<KernelFit> {
    let n = data.len();
    if n < KERNEL_MIN_OBS {
        return Err(Error::TooFewObservations {
            needed: KERNEL_MIN_OBS,
            found: n,
        });
    }
    let p = data[0].0.len();
    for (x, _) in data {
        if x.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "covariate rows of length {} and {}",
                p,
                x.len()
            )));
        }
    }
    // normal-reference rule per coordinate:
    // h_d = σ̂_d (4/(p+2))^{1/(p+4)} n^{−1/(p+4)}
    let nf = n as f64;
    let pf = p as f64;
    let factor = (4.0 / (pf + 2.0)).powf(1.0 / (pf + 4.0)) * nf.powf(-1.0 / (pf + 4.0));
    let mut bandwidths = Vec::with_capacity(p);
    for d in 0..p {
        let mean = data.iter().map(|(x, _)| x[d]).sum::<f64>() / nf;
        let var = data.iter().map(|(x, _)| (x[d] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        let sd = var.sqrt();
        // a constant coordinate carries no information; any positive
        // bandwidth yields a constant kernel factor
        let h = if sd > 0.0 {
            options.bandwidth_scale * sd * factor
        } else {
            1.0
        };
        bandwidths.push(h);
    }
    Ok(KernelFit {
        xs: data.iter().map(|(x, _)| x.clone()).collect(),
        zs: data.iter().map(|(_, z)| f64::from(*z)).collect(),
        bandwidths,
    })
}

impl FittedPropensity for KernelFit {
    fn predict(&self, x: &[f64]) -> f64 {
        // log-space weights shifted by their max so distant queries cannot
        // underflow every weight at once
        let log_w: Vec<f64> = self
            .xs
            .iter()
            .map(|xi| {
                -0.5 * xi
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidths)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for (lw, z) in log_w.iter().zip(&self.zs) {
            let w = (lw - shift).exp();
            num += w * z;
            den += w;
        }
        clamp_prob(num / den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn expit_at_zero() {
        assert_eq!(expit(0.0), 0.5);
    }

    #[test]
    fn expit_complement_identity() {
        for t in [-3.0, 0.7, 42.0] {
            assert_abs_diff_eq!(expit(t), 1.0 - expit(-t), epsilon = 1e-15);
        }
    }

    #[test]
    fn expit_reference_values() {
        // frozen extended-precision evaluations
        assert_abs_diff_eq!(expit(1.0), 0.7310585786300049, epsilon = 1e-15);
        assert_abs_diff_eq!(expit(0.3), 0.574442516811659, epsilon = 1e-15);
        assert_abs_diff_eq!(expit(-3.0), 0.04742587317756678, epsilon = 1e-15);
    }

    #[test]
    fn expit_saturates_without_overflow() {
        assert_eq!(expit(800.0), 1.0);
        assert_eq!(expit(-800.0), 0.0);
        assert!(expit(f64::MAX).is_finite());
        assert!(expit(-f64::MAX).is_finite());
    }

    #[test]
    fn logit_inverts_expit() {
        for t in [-5.0, -0.3, 0.0, 2.0] {
            assert_abs_diff_eq!(logit(expit(t)), t, epsilon = 1e-12);
        }
    }

    fn draw_logistic_data(
        rng: &mut ChaCha20Rng,
        n: usize,
        beta: &[f64],
    ) -> Vec<Observation> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = beta.iter().map(|_| StandardNormal.sample(rng)).collect();
                let z = u8::from(rng.random::<f64>() < expit(dot(&x, beta)));
                (x, z)
            })
            .collect()
    }

    #[test]
    fn symmetric_data_gives_zero_beta() {
        let data: Vec<Observation> = vec![
            (vec![1.0], 1),
            (vec![1.0], 0),
            (vec![-1.0], 1),
            (vec![-1.0], 0),
        ];
        let fit = fit_logistic(&data, LogisticOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.beta[0].abs() < 1e-8);
    }

    #[test]
    fn perfect_separation_detected() {
        let data: Vec<Observation> = vec![
            (vec![-2.0], 0),
            (vec![-1.0], 0),
            (vec![1.0], 1),
            (vec![2.0], 1),
        ];
        assert!(matches!(
            fit_logistic(&data, LogisticOptions::default()),
            Err(Error::SeparationDetected(_))
        ));
    }

    #[test]
    fn single_treatment_level_detected() {
        let data: Vec<Observation> = vec![(vec![1.0], 1), (vec![-0.5], 1), (vec![0.2], 1)];
        assert!(matches!(
            fit_logistic(&data, LogisticOptions::default()),
            Err(Error::SeparationDetected(_))
        ));
    }

    #[test]
    fn rank_deficient_design_detected() {
        // second column is twice the first
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let data: Vec<Observation> = (0..50)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let z = u8::from(rng.random::<f64>() < expit(x));
                (vec![x, 2.0 * x], z)
            })
            .collect();
        assert!(matches!(
            fit_logistic(&data, LogisticOptions::default()),
            Err(Error::RankDeficient)
        ));
    }

    #[test]
    fn recovers_beta_within_monte_carlo_error() {
        let beta = [0.5, -0.25];
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let data = draw_logistic_data(&mut rng, 10_000, &beta);
        let fit = fit_logistic(&data, LogisticOptions::default()).unwrap();
        assert!(fit.converged);

        // Fisher-information standard errors at the fit
        let p = 2;
        let mut hess = vec![0.0; p * p];
        for (x, _) in &data {
            let pr = expit(dot(x, &fit.beta));
            let w = pr * (1.0 - pr);
            for a in 0..p {
                for b in 0..p {
                    hess[a * p + b] += w * x[a] * x[b];
                }
            }
        }
        for (k, &truth) in beta.iter().enumerate() {
            let mut e = vec![0.0; p];
            e[k] = 1.0;
            let col = cholesky_solve(&hess, &e, p).unwrap();
            let se = col[k].sqrt();
            assert!(
                (fit.beta[k] - truth).abs() < 3.0 * se,
                "beta[{k}] = {} vs truth {truth} (se {se})",
                fit.beta[k]
            );
        }

        // score at the optimum: analytic max-norm below tolerance, and the
        // central finite difference of the log-likelihood is zero to
        // within its own roundoff floor
        let loglik_at = |b: &[f64]| -> f64 {
            data.iter()
                .map(|(x, z)| f64::from(*z) * dot(x, b) - softplus(dot(x, b)))
                .sum()
        };
        let mut grad = vec![0.0; p];
        for (x, z) in &data {
            let r = f64::from(*z) - expit(dot(x, &fit.beta));
            for a in 0..p {
                grad[a] += x[a] * r;
            }
        }
        for k in 0..p {
            assert!(grad[k].abs() < 1e-8, "analytic score {}", grad[k]);
            let h = 1e-6;
            let mut up = fit.beta.clone();
            let mut dn = fit.beta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (loglik_at(&up) - loglik_at(&dn)) / (2.0 * h);
            assert!(fd.abs() < 1e-3, "finite-difference score {fd}");
        }
    }

    #[test]
    fn irls_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let data = draw_logistic_data(&mut rng, 200, &[0.4, -0.8, 0.1]);
        let p = 3;
        let loglik_at = |b: &[f64]| -> f64 {
            data.iter()
                .map(|(x, z)| f64::from(*z) * dot(x, b) - softplus(dot(x, b)))
                .sum()
        };
        for _ in 0..10 {
            let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut grad = vec![0.0; p];
            for (x, z) in &data {
                let r = f64::from(*z) - expit(dot(x, &beta));
                for a in 0..p {
                    grad[a] += x[a] * r;
                }
            }
            for k in 0..p {
                let h = 1e-6;
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (loglik_at(&up) - loglik_at(&dn)) / (2.0 * h);
                let rel = (grad[k] - fd).abs() / grad[k].abs().max(1.0);
                assert!(rel < 1e-5, "component {k}: analytic {} fd {fd}", grad[k]);
            }
        }
    }

    #[test]
    fn loglik_non_decreasing_across_iterations() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let data = draw_logistic_data(&mut rng, 300, &[1.2, -0.6]);
        let mut trace = Vec::new();
        fit_logistic_monitored(&data, LogisticOptions::default(), |ll| trace.push(ll)).unwrap();
        assert!(trace.len() >= 2);
        for pair in trace.windows(2) {
            assert!(pair[1] >= pair[0], "log-likelihood decreased: {pair:?}");
        }
    }

    #[test]
    fn constant_treatment_kernel_clamps_to_one() {
        let data: Vec<Observation> = (0..25).map(|i| (vec![i as f64 / 10.0], 1)).collect();
        let fit = fit_nonparametric(&data, KernelOptions::default()).unwrap();
        assert_eq!(fit.predict(&[0.3]), 1.0 - PROB_EPS);
        assert_eq!(fit.predict(&[100.0]), 1.0 - PROB_EPS);
    }

    #[test]
    fn too_few_observations_rejected() {
        let data: Vec<Observation> = (0..19).map(|i| (vec![i as f64], (i % 2) as u8)).collect();
        assert!(matches!(
            fit_nonparametric(&data, KernelOptions::default()),
            Err(Error::TooFewObservations { needed: 20, found: 19 })
        ));
    }

    #[test]
    fn mirror_symmetric_data_predicts_half_at_origin() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for _ in 0..50 {
            let x: f64 = StandardNormal.sample(&mut rng);
            let z = u8::from(rng.random::<f64>() < expit(2.0 * x));
            data.push((vec![x], z));
            data.push((vec![-x], 1 - z));
        }
        let fit = fit_nonparametric(&data, KernelOptions::default()).unwrap();
        assert_abs_diff_eq!(fit.predict(&[0.0]), 0.5, epsilon = 1e-10);
    }

    #[test]
    fn kernel_tracks_sinusoidal_truth() {
        let truth = |x: f64| expit((2.0 * x).sin());
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let data: Vec<Observation> = (0..5000)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let z = u8::from(rng.random::<f64>() < truth(x));
                (vec![x], z)
            })
            .collect();
        let fit = fit_nonparametric(&data, KernelOptions::default()).unwrap();
        let grid: Vec<f64> = (0..41).map(|i| -2.0 + i as f64 * 0.1).collect();
        let mse = grid
            .iter()
            .map(|&x| (fit.predict(&[x]) - truth(x)).powi(2))
            .sum::<f64>()
            / grid.len() as f64;
        assert!(mse < 0.01, "held-out grid MSE {mse}");
    }

    #[test]
    fn logistic_learner_appends_intercept() {
        // shifted truth: without an intercept the fit cannot center
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let data: Vec<Observation> = (0..2000)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let z = u8::from(rng.random::<f64>() < expit(1.0 + 0.5 * x));
                (vec![x], z)
            })
            .collect();
        let fitted = LogisticLearner::default().fit(&data).unwrap();
        let at_zero = fitted.predict(&[0.0]);
        assert!(
            (at_zero - expit(1.0)).abs() < 0.05,
            "predict(0) = {at_zero}, truth {}",
            expit(1.0)
        );
    }

    proptest! {
        #[test]
        fn expit_bounded_and_monotone(a in -500.0f64..500.0, b in -500.0f64..500.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!((0.0..=1.0).contains(&expit(a)));
            prop_assert!(expit(lo) <= expit(hi));
            prop_assert!((expit(a) + expit(-a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kernel_predictions_clamped(seed in 0u64..50, q in -50.0f64..50.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let data: Vec<Observation> = (0..30)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    (vec![x], u8::from(rng.random_bool(0.9)))
                })
                .collect();
            let fit = fit_nonparametric(&data, KernelOptions::default()).unwrap();
            let pr = fit.predict(&[q]);
            prop_assert!((PROB_EPS..=1.0 - PROB_EPS).contains(&pr));
        }
    }
}
