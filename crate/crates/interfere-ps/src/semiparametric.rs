//! Semiparametric cluster propensity model expit(f(X_ij) + V_i) with f left
//! free of a linear form. f is recovered unit by unit from cross-fitted
//! marginal scores via the integral restriction
//!     ê(X_ij) = ∫ expit(f(X_ij) + v) φ(v; 0, σ_V²) dv,
//! and σ_V² is re-estimated from a one-covariate mixed model with a free
//! loading γ on f. The loop alternates inversion and σ-update; each iteration
//! absorbs γ into f and refits once more, which pins the reported loading to 1
//! by scale invariance, so the convergence test on |γ − 1| is meaningful.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crossfit::OutOfFoldScores;
use crate::error::{Error, Result};
use crate::learners::{clamp_prob, expit};
use crate::mixed_model::{
    fit_mixed_with_starts, log_prob_given_etas, MixedOptions, MAX_CPS_SIZE,
};
use crate::quadrature::{gauss_hermite_rule, QuadratureRule};
use crate::study::{Cluster, Study, TreatmentVector, Unit};

/// Forward map h(f) = ∫ expit(f+v) φ(v; 0, σ_V²) dv under the supplied rule.
/// Strictly increasing in f with range (0,1); h(0) = 0.5 by symmetry.
pub fn marginalize_f(f: f64, sigma2_v: f64, rule: &QuadratureRule) -> f64 {
    debug_assert!((rule.sigma2 - sigma2_v).abs() <= 1e-12 * (1.0 + sigma2_v.abs()));
    let _ = sigma2_v;
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&v, &w)| w * expit(f + v))
        .sum()
}

/// h'(f) = ∫ expit(f+v)(1 − expit(f+v)) φ dv, for the Newton polish.
fn marginalize_deriv(f: f64, rule: &QuadratureRule) -> f64 {
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&v, &w)| {
            let e = expit(f + v);
            w * e * (1.0 - e)
        })
        .sum()
}

/// Unique f with h(f) = ehat: bisection on [−40, 40] until the bracket is
/// narrower than tol, then Newton steps using the quadrature derivative.
pub fn invert_integral_equation(
    ehat: f64,
    sigma2_v: f64,
    rule: &QuadratureRule,
    tol: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let h_lo = marginalize_f(lo, sigma2_v, rule);
    let h_hi = marginalize_f(hi, sigma2_v, rule);
    if !(ehat.is_finite() && ehat >= h_lo && ehat <= h_hi) {
        return Err(Error::BracketFailure {
            target: ehat,
            lo,
            hi,
        });
    }
    let tol = tol.max(1e-14);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if marginalize_f(mid, sigma2_v, rule) < ehat {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut f = 0.5 * (lo + hi);
    for _ in 0..4 {
        let resid = marginalize_f(f, sigma2_v, rule) - ehat;
        let deriv = marginalize_deriv(f, rule);
        if deriv <= 0.0 {
            break;
        }
        let next = (f - resid / deriv).clamp(-40.0, 40.0);
        if (next - f).abs() < 1e-15 * (1.0 + f.abs()) {
            f = next;
            break;
        }
        f = next;
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy)]
pub struct SigmaUpdate {
    pub sigma2_v: f64,
    pub gamma: f64,
}

/// Re-estimate σ_V² by ML from P(Z_ij = 1 | f_ij, V_i) = expit(γ·f_ij + V_i)
/// with f treated as the sole covariate and γ a free loading. start_sigma2
/// seeds one of the optimizer starts. A flat f (no signal) has no
/// identifiable loading; the model collapses to intercept-free random
/// effects and γ is reported as 1.
pub fn update_sigma(
    study: &Study,
    f_values: &BTreeMap<(String, usize), f64>,
    start_sigma2: f64,
) -> Result<SigmaUpdate> {
    let f = aligned_f(study, f_values)?;
    update_sigma_aligned(study, &f, start_sigma2)
}

fn aligned_f(study: &Study, f_values: &BTreeMap<(String, usize), f64>) -> Result<Vec<f64>> {
    let mut f = Vec::with_capacity(study.n());
    for cluster in &study.clusters {
        for unit in &cluster.units {
            let key = (cluster.id.clone(), unit.unit_index);
            match f_values.get(&key) {
                Some(&v) => f.push(v),
                None => {
                    return Err(Error::MissingFValue {
                        cluster_id: cluster.id.clone(),
                        unit: unit.unit_index,
                    })
                }
            }
        }
    }
    Ok(f)
}

fn update_sigma_aligned(study: &Study, f: &[f64], start_sigma2: f64) -> Result<SigmaUpdate> {
    let flat = f.iter().all(|v| v.abs() < 1e-9);
    let synthetic = synthetic_study(study, f, flat);
    let starts = [start_sigma2.max(0.0).sqrt(), 0.25, 1.0];
    let fit = fit_mixed_with_starts(&synthetic, MixedOptions::default(), &starts)?;
    Ok(SigmaUpdate {
        sigma2_v: fit.sigma2_v,
        gamma: if flat { 1.0 } else { fit.beta[0] },
    })
}

/// Clone of the study with f as the single covariate (or none when f is
/// flat), preserving cluster structure and treatments.
fn synthetic_study(study: &Study, f: &[f64], flat: bool) -> Study {
    let mut it = f.iter();
    let clusters = study
        .clusters
        .iter()
        .map(|c| Cluster {
            id: c.id.clone(),
            units: c
                .units
                .iter()
                .map(|u| Unit {
                    cluster_id: c.id.clone(),
                    unit_index: u.unit_index,
                    treatment: u.treatment,
                    outcome: None,
                    covariates: if flat {
                        let _ = it.next();
                        Vec::new()
                    } else {
                        vec![*it.next().unwrap()]
                    },
                })
                .collect(),
        })
        .collect();
    Study {
        clusters,
        p: usize::from(!flat),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SemiparamOptions {
    pub nodes: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub start_sigma2: f64,
    /// Second starting value tried when the loop fails to converge.
    pub restart_sigma2: Option<f64>,
    pub invert_tol: f64,
}

impl Default for SemiparamOptions {
    fn default() -> Self {
        SemiparamOptions {
            nodes: 30,
            tol: 1e-6,
            max_iter: 100,
            start_sigma2: 1.0,
            restart_sigma2: Some(0.25),
            invert_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemiparamFit {
    pub f_values: BTreeMap<(String, usize), f64>,
    pub sigma2_v: f64,
    pub gamma_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Present when produced by fit_semiparametric; not serialized.
    pub ehat_source: Option<OutOfFoldScores>,
}

impl SemiparamFit {
    pub fn f_for(&self, cluster_id: &str, unit_index: usize) -> Option<f64> {
        self.f_values
            .get(&(cluster_id.to_string(), unit_index))
            .copied()
    }
}

#[derive(Serialize, Deserialize)]
struct SemiparamFitWire {
    sigma2_v: f64,
    converged: bool,
    iterations: usize,
    gamma_trace: Vec<f64>,
    f: Vec<FWire>,
}

#[derive(Serialize, Deserialize)]
struct FWire {
    cluster_id: String,
    unit_id: usize,
    f: f64,
}

impl Serialize for SemiparamFit {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = SemiparamFitWire {
            sigma2_v: self.sigma2_v,
            converged: self.converged,
            iterations: self.iterations,
            gamma_trace: self.gamma_trace.clone(),
            f: self
                .f_values
                .iter()
                .map(|((cluster_id, unit_id), &f)| FWire {
                    cluster_id: cluster_id.clone(),
                    unit_id: *unit_id,
                    f,
                })
                .collect(),
        };
        wire.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SemiparamFit {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = SemiparamFitWire::deserialize(deserializer)?;
        let mut f_values = BTreeMap::new();
        for rec in wire.f {
            if f_values
                .insert((rec.cluster_id.clone(), rec.unit_id), rec.f)
                .is_some()
            {
                return Err(D::Error::custom(format!(
                    "duplicate f entry for cluster '{}' unit {}",
                    rec.cluster_id, rec.unit_id
                )));
            }
        }
        Ok(SemiparamFit {
            f_values,
            sigma2_v: wire.sigma2_v,
            gamma_trace: wire.gamma_trace,
            iterations: wire.iterations,
            converged: wire.converged,
            ehat_source: None,
        })
    }
}

/// Three-step semiparametric fit. Each iteration inverts the integral
/// restriction under the current σ_V², re-estimates (σ_V², γ) from the mixed
/// model, absorbs γ into f, and refits; the second fit's loading is 1 up to
/// optimizer tolerance whenever the absorption is consistent, so the loop
/// exits when both the variance and the loading have stabilized.
pub fn fit_semiparametric(
    study: &Study,
    ehat: &OutOfFoldScores,
    options: &SemiparamOptions,
) -> Result<SemiparamFit> {
    match attempt(study, ehat, options, options.start_sigma2) {
        Err(Error::NotConverged { context: c1, .. }) => match options.restart_sigma2 {
            Some(restart) => attempt(study, ehat, options, restart).map_err(|e| match e {
                Error::NotConverged {
                    iterations,
                    context: c2,
                } => Error::NotConverged {
                    iterations,
                    context: format!("{c1}; after restart: {c2}"),
                },
                other => other,
            }),
            None => Err(Error::NotConverged {
                iterations: options.max_iter,
                context: c1,
            }),
        },
        other => other,
    }
}

fn attempt(
    study: &Study,
    ehat: &OutOfFoldScores,
    options: &SemiparamOptions,
    start_sigma2: f64,
) -> Result<SemiparamFit> {
    let mut keys = Vec::with_capacity(study.n());
    let mut escores = Vec::with_capacity(study.n());
    for cluster in &study.clusters {
        for unit in &cluster.units {
            match ehat.get(&cluster.id, unit.unit_index) {
                Some(e) => escores.push(clamp_prob(e)),
                None => {
                    return Err(Error::DimensionMismatch(format!(
                        "no out-of-fold score for unit {} of cluster '{}'",
                        unit.unit_index, cluster.id
                    )))
                }
            }
            keys.push((cluster.id.clone(), unit.unit_index));
        }
    }

    let mut sigma2 = start_sigma2;
    let mut trace = Vec::new();
    for iter in 1..=options.max_iter {
        let rule = gauss_hermite_rule(options.nodes, sigma2)?;
        let f_tilde: Vec<f64> = escores
            .par_iter()
            .map(|&e| invert_integral_equation(e, sigma2, &rule, options.invert_tol))
            .collect::<Result<_>>()?;
        let first = update_sigma_aligned(study, &f_tilde, sigma2)?;
        trace.push(first.gamma);
        let absorbed: Vec<f64> = f_tilde.iter().map(|&v| first.gamma * v).collect();
        let second = update_sigma_aligned(study, &absorbed, first.sigma2_v)?;
        trace.push(second.gamma);
        let delta = (second.sigma2_v - sigma2).abs();
        sigma2 = second.sigma2_v;
        if delta < options.tol && (second.gamma - 1.0).abs() < options.tol {
            let f_values = keys
                .into_iter()
                .zip(&f_tilde)
                .map(|(key, &v)| (key, second.gamma * v))
                .collect();
            return Ok(SemiparamFit {
                f_values,
                sigma2_v: sigma2,
                gamma_trace: trace,
                iterations: iter,
                converged: true,
                ehat_source: Some(ehat.clone()),
            });
        }
    }
    let shown: Vec<String> = trace.iter().map(|g| format!("{g:.6}")).collect();
    Err(Error::NotConverged {
        iterations: options.max_iter,
        context: format!(
            "semiparametric loop from sigma2_v = {start_sigma2} stalled at sigma2_v = \
             {sigma2:.6}; gamma trace [{}]",
            shown.join(", ")
        ),
    })
}

/// CPS under the fitted semiparametric model: the mixed-model cluster
/// integral with per-unit success probability expit(f_ij + v).
pub fn semiparam_cluster_prob(
    cluster: &Cluster,
    treatments: &TreatmentVector,
    fit: &SemiparamFit,
    rule: &QuadratureRule,
) -> Result<f64> {
    if (rule.sigma2 - fit.sigma2_v).abs() > 1e-12 * (1.0 + fit.sigma2_v) {
        return Err(Error::DimensionMismatch(format!(
            "quadrature rule targets sigma2_v = {}, fit has {}",
            rule.sigma2, fit.sigma2_v
        )));
    }
    if treatments.len() != cluster.size() {
        return Err(Error::DimensionMismatch(format!(
            "{} treatments for a cluster of size {}",
            treatments.len(),
            cluster.size()
        )));
    }
    if cluster.size() > MAX_CPS_SIZE {
        return Err(Error::ClusterTooLarge {
            cluster_id: cluster.id.clone(),
            size: cluster.size(),
            limit: MAX_CPS_SIZE,
        });
    }
    let mut etas = Vec::with_capacity(cluster.size());
    for unit in &cluster.units {
        match fit.f_for(&cluster.id, unit.unit_index) {
            Some(f) => etas.push(f),
            None => {
                return Err(Error::MissingFValue {
                    cluster_id: cluster.id.clone(),
                    unit: unit.unit_index,
                })
            }
        }
    }
    Ok(log_prob_given_etas(&etas, &treatments.values, rule).exp())
}

/// f for a covariate point outside the fitted study: invert the learner's
/// predicted marginal score at the converged σ_V².
pub fn invert_predicted(ehat: f64, fit: &SemiparamFit, rule: &QuadratureRule) -> Result<f64> {
    if (rule.sigma2 - fit.sigma2_v).abs() > 1e-12 * (1.0 + fit.sigma2_v) {
        return Err(Error::DimensionMismatch(format!(
            "quadrature rule targets sigma2_v = {}, fit has {}",
            rule.sigma2, fit.sigma2_v
        )));
    }
    invert_integral_equation(clamp_prob(ehat), fit.sigma2_v, rule, 1e-10)
}
