//! Parametric cluster-level propensity scores.
//!
//! The model: treatments are conditionally independent Bernoulli given a
//! cluster-level effect V ~ N(0, σ_V²), with success probability
//! expit(X'β + V). Marginalizing V yields the joint probability of any
//! treatment vector (the quantity every downstream weight divides by) and
//! the likelihood that [`fit_mixed`] maximizes over (β, log σ_V).
//!
//! All integrals run on a Gauss–Hermite rule targeting the current σ_V²;
//! products over units are accumulated in log space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{expit, fit_logistic, LogisticOptions};
use crate::numeric::{dot, logsumexp, pairwise_sum, softplus};
use crate::optim::{maximize_bfgs, BfgsOptions};
use crate::quadrature::{gauss_hermite_rule, QuadratureRule};
use crate::study::{Study, TreatmentVector};

/// Largest cluster for which non-log joint probabilities are evaluated;
/// beyond it callers must use [`log_cluster_prob`].
pub const MAX_CPS_SIZE: usize = 30;

/// Fitted variance below this is a boundary solution, reported as 0.
const DEGENERATE_SIGMA2: f64 = 1e-6;

/// Bounds on θ = log σ_V inside the optimizer; the likelihood is flat in θ
/// well inside them, they only guard against overflow probes.
const THETA_LO: f64 = -20.0;
const THETA_HI: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedModelFit {
    pub beta: Vec<f64>,
    pub sigma2_v: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the score in (β, log σ_V) at the reported solution.
    pub grad_norm: f64,
    /// σ_V² collapsed to the boundary; `sigma2_v` is reported as 0.
    pub degenerate_variance: bool,
}

/// One cluster's covariate rows and a candidate treatment vector.
#[derive(Debug, Clone, Copy)]
pub struct CpsQuery<'a> {
    pub covariates: &'a [Vec<f64>],
    pub treatments: &'a TreatmentVector,
}

impl<'a> CpsQuery<'a> {
    pub fn new(covariates: &'a [Vec<f64>], treatments: &'a TreatmentVector) -> Result<Self> {
        if covariates.len() != treatments.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows, {} treatment entries",
                covariates.len(),
                treatments.len()
            )));
        }
        if let Some(j) = treatments.values.iter().position(|&z| z > 1) {
            return Err(Error::NonBinaryTreatment {
                cluster_id: String::new(),
                unit: j,
                value: treatments.values[j] as i64,
            });
        }
        Ok(CpsQuery {
            covariates,
            treatments,
        })
    }
}

/// P(Z = 1 | X = x, V = v) = expit(x'β + f_offset + v). The offset carries
/// the nonparametric score when the semiparametric module calls in.
pub fn conditional_prob(x: &[f64], v: f64, beta: &[f64], f_offset: Option<f64>) -> f64 {
    expit(dot(x, beta) + f_offset.unwrap_or(0.0) + v)
}

/// log Σ_k w_k ∏_j p_j(v_k)^{z_j} (1−p_j(v_k))^{1−z_j} for linear
/// predictors η_j; the log-space kernel under every joint probability.
pub(crate) fn log_prob_given_etas(etas: &[f64], z: &[u8], rule: &QuadratureRule) -> f64 {
    let mut terms = Vec::with_capacity(rule.nodes.len());
    for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
        let mut lt = w.ln();
        for (&eta, &zj) in etas.iter().zip(z) {
            let t = eta + v;
            lt -= if zj == 1 { softplus(-t) } else { softplus(t) };
        }
        terms.push(lt);
    }
    logsumexp(&terms)
}

fn check_rule_matches(fit: &MixedModelFit, rule: &QuadratureRule) -> Result<()> {
    if rule.sigma2 != fit.sigma2_v {
        return Err(Error::DimensionMismatch(format!(
            "quadrature rule targets variance {}, fit has sigma2_v = {}",
            rule.sigma2, fit.sigma2_v
        )));
    }
    Ok(())
}

fn query_etas(query: &CpsQuery, beta: &[f64]) -> Result<Vec<f64>> {
    query
        .covariates
        .iter()
        .map(|x| {
            if x.len() != beta.len() {
                return Err(Error::DimensionMismatch(format!(
                    "covariate row of length {}, beta of length {}",
                    x.len(),
                    beta.len()
                )));
            }
            Ok(dot(x, beta))
        })
        .collect()
}

/// Joint probability of the queried treatment vector. Strictly inside
/// (0,1); cluster sizes above [`MAX_CPS_SIZE`] must go through
/// [`log_cluster_prob`].
pub fn cluster_prob(query: &CpsQuery, fit: &MixedModelFit, rule: &QuadratureRule) -> Result<f64> {
    let n = query.covariates.len();
    if n > MAX_CPS_SIZE {
        return Err(Error::ClusterTooLarge {
            cluster_id: "(query)".to_string(),
            size: n,
            limit: MAX_CPS_SIZE,
        });
    }
    log_cluster_prob(query, fit, rule).map(f64::exp)
}

/// log of [`cluster_prob`], defined for any cluster size.
pub fn log_cluster_prob(
    query: &CpsQuery,
    fit: &MixedModelFit,
    rule: &QuadratureRule,
) -> Result<f64> {
    check_rule_matches(fit, rule)?;
    if query.covariates.len() != query.treatments.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} covariate rows, {} treatment entries",
            query.covariates.len(),
            query.treatments.len()
        )));
    }
    let etas = query_etas(query, &fit.beta)?;
    Ok(log_prob_given_etas(&etas, &query.treatments.values, rule))
}

/// Observed-data marginal log-likelihood Σ_i log P(z_i | X_i) at (β, σ_V²).
/// Clusters contribute independently; the reduction is deterministic for
/// any thread count.
pub fn marginal_loglik(
    study: &Study,
    beta: &[f64],
    sigma2_v: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    if rule.sigma2 != sigma2_v {
        return Err(Error::DimensionMismatch(format!(
            "quadrature rule targets variance {}, requested sigma2_v = {}",
            rule.sigma2, sigma2_v
        )));
    }
    let contributions: Vec<f64> = study
        .clusters
        .par_iter()
        .map(|cluster| {
            let etas: Vec<f64> = cluster.units.iter().map(|u| dot(&u.covariates, beta)).collect();
            let z: Vec<u8> = cluster.units.iter().map(|u| u.treatment).collect();
            log_prob_given_etas(&etas, &z, rule)
        })
        .collect();
    let total = pairwise_sum(&contributions);
    if !total.is_finite() {
        return Err(Error::NonFiniteLikelihood(format!(
            "marginal log-likelihood = {total}"
        )));
    }
    Ok(total)
}

/// Marginal log-likelihood with its analytic gradient in (β, θ = log σ_V),
/// the exact gradient of the K-node discretized objective. Exposed so the
/// gradient can be verified against finite differences from outside the
/// optimizer. Requires σ_V² > 0 (θ must be finite).
pub fn marginal_loglik_grad(
    study: &Study,
    beta: &[f64],
    sigma2_v: f64,
    nodes: usize,
) -> Result<(f64, Vec<f64>)> {
    if beta.len() != study.p {
        return Err(Error::DimensionMismatch(format!(
            "beta of length {}, study has p = {}",
            beta.len(),
            study.p
        )));
    }
    if !(sigma2_v > 0.0 && sigma2_v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "gradient evaluation needs sigma2_v > 0, got {sigma2_v}"
        )));
    }
    let data: Vec<ClusterData> = study
        .clusters
        .iter()
        .map(|c| ClusterData {
            x: c.units.iter().map(|u| u.covariates.clone()).collect(),
            z: c.units.iter().map(|u| u.treatment).collect(),
        })
        .collect();
    let mut params = beta.to_vec();
    params.push(0.5 * sigma2_v.ln());
    loglik_with_grad(&data, study.p, &params, nodes).ok_or_else(|| {
        Error::NonFiniteLikelihood("gradient evaluation produced a non-finite value".to_string())
    })
}

/// Compact per-cluster design for the optimizer.
struct ClusterData {
    x: Vec<Vec<f64>>,
    z: Vec<u8>,
}

/// Log-likelihood and its analytic gradient in (β, θ), θ = log σ_V.
///
/// With v_k = √2 x_k e^θ the node positions move with θ while the weights
/// do not, so dv_k/dθ = v_k and the θ-score of one cluster is
/// Σ_k ω_k v_k Σ_j (z_j − p_j(v_k)) with ω the posterior node weights.
/// This is the exact gradient of the K-node discretized objective.
fn loglik_with_grad(data: &[ClusterData], p: usize, params: &[f64], k: usize) -> Option<(f64, Vec<f64>)> {
    let beta = &params[..p];
    let theta = params[p];
    if !(THETA_LO..=THETA_HI).contains(&theta) {
        return None;
    }
    let sigma2 = (2.0 * theta).exp();
    let rule = gauss_hermite_rule(k, sigma2).ok()?;
    let log_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();

    let per_cluster: Vec<(f64, Vec<f64>)> = data
        .par_iter()
        .map(|cd| {
            let etas: Vec<f64> = cd.x.iter().map(|x| dot(x, beta)).collect();
            let kn = rule.nodes.len();
            let mut log_terms = vec![0.0; kn];
            let mut resid_sum = vec![0.0; kn];
            let mut grad_beta_at = vec![0.0; kn * p];
            for (knode, (&v, lw)) in rule.nodes.iter().zip(&log_w).enumerate() {
                let mut lt = *lw;
                let mut r = 0.0;
                for (j, (&eta, &zj)) in etas.iter().zip(&cd.z).enumerate() {
                    let t = eta + v;
                    lt -= if zj == 1 { softplus(-t) } else { softplus(t) };
                    let resid = f64::from(zj) - expit(t);
                    r += resid;
                    for a in 0..p {
                        grad_beta_at[knode * p + a] += resid * cd.x[j][a];
                    }
                }
                log_terms[knode] = lt;
                resid_sum[knode] = r;
            }
            let ll = logsumexp(&log_terms);
            let mut grad = vec![0.0; p + 1];
            for knode in 0..kn {
                let omega = (log_terms[knode] - ll).exp();
                for a in 0..p {
                    grad[a] += omega * grad_beta_at[knode * p + a];
                }
                grad[p] += omega * resid_sum[knode] * rule.nodes[knode];
            }
            (ll, grad)
        })
        .collect();

    let loglik = pairwise_sum(&per_cluster.iter().map(|c| c.0).collect::<Vec<_>>());
    if !loglik.is_finite() {
        return None;
    }
    let mut grad = Vec::with_capacity(p + 1);
    let mut scratch = vec![0.0; data.len()];
    for a in 0..=p {
        for (i, c) in per_cluster.iter().enumerate() {
            scratch[i] = c.1[a];
        }
        let g = pairwise_sum(&scratch);
        if !g.is_finite() {
            return None;
        }
        grad.push(g);
    }
    Some((loglik, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct MixedOptions {
    /// Gauss–Hermite node count, fixed across the optimization.
    pub nodes: usize,
    /// Max-norm gradient tolerance in (β, log σ_V).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MixedOptions {
    fn default() -> Self {
        MixedOptions {
            nodes: crate::quadrature::DEFAULT_NODES,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

/// Maximum-likelihood fit of (β, σ_V²) by BFGS on (β, log σ_V), multi-start
/// from σ_V ∈ {0.25, 1.0} with β initialized at the plain-logistic fit.
/// Boundary solutions (σ̂_V² below 1e−6) are reported as sigma2_v = 0 with
/// `degenerate_variance` set, not as an error.
pub fn fit_mixed(study: &Study, options: MixedOptions) -> Result<MixedModelFit> {
    fit_mixed_with_starts(study, options, &[0.25, 1.0])
}

/// Same fit with caller-chosen σ_V starting points (warm starts for the
/// semiparametric outer loop).
pub(crate) fn fit_mixed_with_starts(
    study: &Study,
    options: MixedOptions,
    sigma_v_starts: &[f64],
) -> Result<MixedModelFit> {
    if study.clusters.len() < 2 {
        return Err(Error::TooFewObservations {
            needed: 2,
            found: study.clusters.len(),
        });
    }
    let p = study.p;
    let pooled: Vec<(Vec<f64>, u8)> = study
        .units()
        .map(|u| (u.covariates.clone(), u.treatment))
        .collect();
    let init = fit_logistic(&pooled, LogisticOptions::default())?;

    let data: Vec<ClusterData> = study
        .clusters
        .iter()
        .map(|c| ClusterData {
            x: c.units.iter().map(|u| u.covariates.clone()).collect(),
            z: c.units.iter().map(|u| u.treatment).collect(),
        })
        .collect();
    let objective =
        |params: &[f64]| loglik_with_grad(&data, p, params, options.nodes);
    let bfgs_options = BfgsOptions {
        tol: options.tol,
        max_iter: options.max_iter,
        max_step: 10.0,
    };

    let mut best: Option<crate::optim::BfgsResult> = None;
    for &sigma_v0 in sigma_v_starts {
        let mut x0 = init.beta.clone();
        x0.push(sigma_v0.max(1e-4).ln());
        let run = maximize_bfgs(&objective, &x0, &bfgs_options)?;
        let better = match &best {
            None => true,
            Some(b) => {
                (run.converged && !b.converged) || (run.converged == b.converged && run.value > b.value)
            }
        };
        if better {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    if !best.converged {
        return Err(Error::NotConverged {
            iterations: best.iterations,
            context: format!("mixed-model likelihood (grad max-norm {:.3e})", best.grad_norm),
        });
    }
    let theta = best.x[p];
    let sigma2_v = (2.0 * theta).exp();
    let degenerate = sigma2_v < DEGENERATE_SIGMA2;
    Ok(MixedModelFit {
        beta: best.x[..p].to_vec(),
        sigma2_v: if degenerate { 0.0 } else { sigma2_v },
        loglik: best.value,
        iterations: best.iterations,
        converged: best.converged,
        grad_norm: best.grad_norm,
        degenerate_variance: degenerate,
    })
}

/// pmf of a sum of independent Bernoulli(p_i) at g, by the O(m²) in-place
/// convolution; exact up to roundoff.
pub fn poisson_binomial_pmf(p: &[f64], g: usize) -> Result<f64> {
    if g > p.len() {
        return Err(Error::InvalidExposureLevel {
            level: g,
            peers: p.len(),
        });
    }
    let mut c = vec![0.0; p.len() + 1];
    c[0] = 1.0;
    for (i, &q) in p.iter().enumerate() {
        for t in (1..=i + 1).rev() {
            c[t] = c[t] * (1.0 - q) + c[t - 1] * q;
        }
        c[0] *= 1.0 - q;
    }
    Ok(c[g])
}

/// Joint probability that unit j receives treatment z while exactly g of
/// its peers are treated: the exposure-mapping propensity under stratified
/// interference. Conditional independence given V makes the peer count
/// Poisson-binomial at each node.
pub fn exposure_joint_prob(
    covariates: &[Vec<f64>],
    j: usize,
    z: u8,
    g: usize,
    fit: &MixedModelFit,
    rule: &QuadratureRule,
) -> Result<f64> {
    let n = covariates.len();
    if j >= n {
        return Err(Error::IndexOutOfRange { index: j, size: n });
    }
    if g > n - 1 {
        return Err(Error::InvalidExposureLevel {
            level: g,
            peers: n - 1,
        });
    }
    if z > 1 {
        return Err(Error::InvalidConfig(format!(
            "exposure treatment must be 0 or 1, got {z}"
        )));
    }
    check_rule_matches(fit, rule)?;
    let etas: Vec<f64> = covariates
        .iter()
        .map(|x| {
            if x.len() != fit.beta.len() {
                return Err(Error::DimensionMismatch(format!(
                    "covariate row of length {}, beta of length {}",
                    x.len(),
                    fit.beta.len()
                )));
            }
            Ok(dot(x, &fit.beta))
        })
        .collect::<Result<_>>()?;

    let mut acc = 0.0;
    let mut peer_p = vec![0.0; n - 1];
    for (&v, &w) in rule.nodes.iter().zip(&rule.weights) {
        let pj = expit(etas[j] + v);
        let own = if z == 1 { pj } else { 1.0 - pj };
        let mut t = 0;
        for (jj, &eta) in etas.iter().enumerate() {
            if jj != j {
                peer_p[t] = expit(eta + v);
                t += 1;
            }
        }
        acc += w * own * poisson_binomial_pmf(&peer_p, g)?;
    }
    Ok(acc)
}
