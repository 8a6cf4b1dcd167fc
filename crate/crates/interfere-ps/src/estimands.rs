//! Inverse-probability-weighted estimands under Bernoulli allocation
//! policies: population average potential outcomes μ(z, α), direct effects
//! DE(α) = μ(1,α) − μ(0,α), and spillover effects SE(α,α′) on a fixed arm.
//! Weights divide by the cluster-level propensity score of the realized
//! treatment vector, supplied through a CpsProvider.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed_model::{cluster_prob, log_prob_given_etas, CpsQuery, MixedModelFit};
use crate::numeric::pairwise_sum;
use crate::quadrature::{gauss_hermite_rule, QuadratureRule};
use crate::semiparametric::{semiparam_cluster_prob, SemiparamFit};
use crate::simulation::PotentialOutcomeTable;
use crate::study::{all_treatment_vectors, Cluster, Study, TreatmentVector, Unit};

/// Enumeration over 2^{n_i} treatment vectors is capped at this cluster size.
pub const ENUM_LIMIT: usize = 12;

/// Bernoulli(α) counterfactual assignment policy, α strictly inside (0,1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AllocationPolicy {
    alpha: f64,
}

impl AllocationPolicy {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "allocation alpha must lie strictly in (0,1), got {alpha}"
            )));
        }
        Ok(AllocationPolicy { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl TryFrom<f64> for AllocationPolicy {
    type Error = String;

    fn try_from(alpha: f64) -> std::result::Result<Self, String> {
        AllocationPolicy::new(alpha).map_err(|e| e.to_string())
    }
}

impl From<AllocationPolicy> for f64 {
    fn from(policy: AllocationPolicy) -> f64 {
        policy.alpha
    }
}

/// Probability of the peer vector under the policy: α^s (1−α)^{m−s} with
/// s treated peers. The empty vector has probability 1.
pub fn policy_weight(z_minus_j: &[u8], policy: AllocationPolicy) -> f64 {
    debug_assert!(z_minus_j.iter().all(|&z| z <= 1));
    let s = z_minus_j.iter().filter(|&&z| z == 1).count();
    let alpha = policy.alpha;
    alpha.powi(s as i32) * (1.0 - alpha).powi((z_minus_j.len() - s) as i32)
}

/// Cluster-level propensity score P(Z_i = z | X_i), however obtained.
/// Implementations must be read-only and safe to query concurrently.
pub trait CpsProvider: Sync {
    fn prob(&self, cluster: &Cluster, z: &TreatmentVector) -> Result<f64>;
}

/// CPS from a fitted (or true-parameter) mixed-effects logistic model.
pub struct MixedCps {
    pub fit: MixedModelFit,
    pub rule: QuadratureRule,
}

impl MixedCps {
    pub fn new(fit: MixedModelFit, nodes: usize) -> Result<Self> {
        let rule = gauss_hermite_rule(nodes, fit.sigma2_v)?;
        Ok(MixedCps { fit, rule })
    }

    /// True-parameter provider for simulation truth.
    pub fn from_parameters(beta: Vec<f64>, sigma2_v: f64, nodes: usize) -> Result<Self> {
        let fit = MixedModelFit {
            beta,
            sigma2_v,
            loglik: 0.0,
            iterations: 0,
            converged: true,
            grad_norm: 0.0,
            degenerate_variance: sigma2_v == 0.0,
        };
        MixedCps::new(fit, nodes)
    }
}

impl CpsProvider for MixedCps {
    fn prob(&self, cluster: &Cluster, z: &TreatmentVector) -> Result<f64> {
        let covariates = cluster.covariate_rows();
        let query = CpsQuery::new(&covariates, z)?;
        cluster_prob(&query, &self.fit, &self.rule)
    }
}

/// CPS from a converged semiparametric fit.
pub struct SemiparamCps {
    pub fit: SemiparamFit,
    pub rule: QuadratureRule,
}

impl SemiparamCps {
    pub fn new(fit: SemiparamFit, nodes: usize) -> Result<Self> {
        let rule = gauss_hermite_rule(nodes, fit.sigma2_v)?;
        Ok(SemiparamCps { fit, rule })
    }
}

impl CpsProvider for SemiparamCps {
    fn prob(&self, cluster: &Cluster, z: &TreatmentVector) -> Result<f64> {
        semiparam_cluster_prob(cluster, z, &self.fit, &self.rule)
    }
}

/// CPS from known per-unit linear predictors η_ij (e.g. a nonlinear
/// propensity truth evaluated on the study covariates), with the cluster
/// effect integrated out by the rule.
pub struct EtaCps {
    pub etas: BTreeMap<String, Vec<f64>>,
    pub rule: QuadratureRule,
}

impl EtaCps {
    pub fn from_study(
        study: &Study,
        sigma2_v: f64,
        nodes: usize,
        eta: impl Fn(&Unit) -> f64,
    ) -> Result<Self> {
        let rule = gauss_hermite_rule(nodes, sigma2_v)?;
        let etas = study
            .clusters
            .iter()
            .map(|c| (c.id.clone(), c.units.iter().map(&eta).collect()))
            .collect();
        Ok(EtaCps { etas, rule })
    }
}

impl CpsProvider for EtaCps {
    fn prob(&self, cluster: &Cluster, z: &TreatmentVector) -> Result<f64> {
        let etas = self.etas.get(&cluster.id).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "no linear predictors stored for cluster '{}'",
                cluster.id
            ))
        })?;
        if etas.len() != z.len() {
            return Err(Error::DimensionMismatch(format!(
                "cluster '{}' has {} stored predictors, queried with {} treatments",
                cluster.id,
                etas.len(),
                z.len()
            )));
        }
        Ok(log_prob_given_etas(etas, &z.values, &self.rule).exp())
    }
}

/// Explicit per-vector probabilities, for hand-built designs.
pub struct TableCps {
    pub probs: BTreeMap<(String, Vec<u8>), f64>,
}

impl CpsProvider for TableCps {
    fn prob(&self, cluster: &Cluster, z: &TreatmentVector) -> Result<f64> {
        self.probs
            .get(&(cluster.id.clone(), z.values.clone()))
            .copied()
            .ok_or_else(|| {
                Error::ZeroPropensity(format!(
                    "{} (no table entry for {:?})",
                    cluster.id, z.values
                ))
            })
    }
}

/// Horvitz–Thompson cluster contribution to μ(z, α):
/// (1/n_i) Σ_j 1{Z_ij = z} · policy_weight(Z_{i(−j)}) · Y_ij / CPS(Z_i | X_i).
pub fn cluster_ipw(
    cluster: &Cluster,
    z: u8,
    policy: AllocationPolicy,
    cps: &dyn CpsProvider,
) -> Result<f64> {
    if z > 1 {
        return Err(Error::InvalidConfig(format!(
            "treatment arm must be 0 or 1, got {z}"
        )));
    }
    let observed = cluster.observed_treatments();
    let prob = cps.prob(cluster, &observed)?;
    check_propensity(cluster, prob)?;
    let outcomes = collect_outcomes(cluster)?;
    Ok(ipw_sum(cluster, &observed, &outcomes, z, policy) / prob)
}

fn check_propensity(cluster: &Cluster, prob: f64) -> Result<()> {
    if !prob.is_finite() || prob <= 0.0 {
        return Err(Error::ZeroPropensity(format!(
            "{} (CPS value {prob})",
            cluster.id
        )));
    }
    Ok(())
}

fn collect_outcomes(cluster: &Cluster) -> Result<Vec<f64>> {
    cluster
        .units
        .iter()
        .map(|u| {
            u.outcome.ok_or_else(|| Error::MissingOutcome {
                cluster_id: cluster.id.clone(),
                unit: u.unit_index,
            })
        })
        .collect()
}

/// The numerator sum divided by n_i, before the propensity division.
fn ipw_sum(
    cluster: &Cluster,
    observed: &TreatmentVector,
    outcomes: &[f64],
    z: u8,
    policy: AllocationPolicy,
) -> f64 {
    let n = cluster.size();
    let mut acc = 0.0;
    let mut peers = Vec::with_capacity(n.saturating_sub(1));
    for j in 0..n {
        if observed.values[j] == z {
            peers.clear();
            peers.extend(
                observed
                    .values
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != j)
                    .map(|(_, &v)| v),
            );
            acc += policy_weight(&peers, policy) * outcomes[j];
        }
    }
    acc / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuEntry {
    pub z: u8,
    pub alpha: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEntry {
    pub alpha: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpilloverEntry {
    pub alpha: f64,
    pub alpha_prime: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClusterRow {
    pub cluster_id: String,
    /// Contributions in mu-entry order: z = 0 then z = 1, α in report order.
    pub contributions: Vec<f64>,
}

/// μ(z,α), DE(α), SE(α,α′) with per-cluster contributions and empirical
/// standard errors (variance of cluster contributions over I). The identities
/// DE(α) = μ(1,α) − μ(0,α) and SE(α,α′) = μ(arm,α) − μ(arm,α′) hold exactly
/// as f64 arithmetic on the stored values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub alphas: Vec<f64>,
    pub spillover_arm: u8,
    pub clusters: usize,
    pub mu: Vec<MuEntry>,
    pub direct_effect: Vec<DirectEntry>,
    pub spillover_effect: Vec<SpilloverEntry>,
    pub per_cluster: Vec<PerClusterRow>,
}

impl EstimandReport {
    pub fn mu_value(&self, z: u8, alpha: f64) -> Option<f64> {
        self.mu
            .iter()
            .find(|e| e.z == z && e.alpha == alpha)
            .map(|e| e.value)
    }

    pub fn direct_value(&self, alpha: f64) -> Option<f64> {
        self.direct_effect
            .iter()
            .find(|e| e.alpha == alpha)
            .map(|e| e.value)
    }

    pub fn spillover_value(&self, alpha: f64, alpha_prime: f64) -> Option<f64> {
        self.spillover_effect
            .iter()
            .find(|e| e.alpha == alpha && e.alpha_prime == alpha_prime)
            .map(|e| e.value)
    }

    /// Flat export: `estimand,z,alpha,alpha_prime,value,std_error`, with
    /// empty fields where a column does not apply.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "estimand,z,alpha,alpha_prime,value,std_error")?;
        for e in &self.mu {
            writeln!(out, "mu,{},{},,{},{}", e.z, e.alpha, e.value, e.std_error)?;
        }
        for e in &self.direct_effect {
            writeln!(
                out,
                "direct_effect,,{},,{},{}",
                e.alpha, e.value, e.std_error
            )?;
        }
        for e in &self.spillover_effect {
            writeln!(
                out,
                "spillover_effect,{},{},{},{},{}",
                self.spillover_arm, e.alpha, e.alpha_prime, e.value, e.std_error
            )?;
        }
        Ok(())
    }
}

/// Build the report from per-cluster contribution rows (columns in
/// mu-entry order: z-major, α in the given order).
pub(crate) fn assemble_report(
    cluster_ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    alphas: &[f64],
    spillover_arm: u8,
) -> EstimandReport {
    let i = rows.len();
    let p = alphas.len();
    let col = |idx: usize| -> Vec<f64> { rows.iter().map(|r| r[idx]).collect() };
    let mean_se = |values: &[f64]| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = pairwise_sum(values) / n;
        if values.len() < 2 {
            return (mean, 0.0);
        }
        let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / (n - 1.0);
        (mean, (var / n).sqrt())
    };

    let mut mu = Vec::with_capacity(2 * p);
    for z in [0u8, 1] {
        for (a, &alpha) in alphas.iter().enumerate() {
            let values = col(usize::from(z) * p + a);
            let (value, std_error) = mean_se(&values);
            mu.push(MuEntry {
                z,
                alpha,
                value,
                std_error,
            });
        }
    }
    let mut direct_effect = Vec::with_capacity(p);
    for (a, &alpha) in alphas.iter().enumerate() {
        let diffs: Vec<f64> = rows.iter().map(|r| r[p + a] - r[a]).collect();
        let (_, std_error) = mean_se(&diffs);
        direct_effect.push(DirectEntry {
            alpha,
            value: mu[p + a].value - mu[a].value,
            std_error,
        });
    }
    let arm_offset = usize::from(spillover_arm) * p;
    let mut spillover_effect = Vec::with_capacity(p * p);
    for (a, &alpha) in alphas.iter().enumerate() {
        for (b, &alpha_prime) in alphas.iter().enumerate() {
            let diffs: Vec<f64> = rows
                .iter()
                .map(|r| r[arm_offset + a] - r[arm_offset + b])
                .collect();
            let (_, std_error) = mean_se(&diffs);
            spillover_effect.push(SpilloverEntry {
                alpha,
                alpha_prime,
                value: mu[arm_offset + a].value - mu[arm_offset + b].value,
                std_error,
            });
        }
    }
    let per_cluster = cluster_ids
        .into_iter()
        .zip(rows)
        .map(|(cluster_id, contributions)| PerClusterRow {
            cluster_id,
            contributions,
        })
        .collect();
    EstimandReport {
        alphas: alphas.to_vec(),
        spillover_arm,
        clusters: i,
        mu,
        direct_effect,
        spillover_effect,
        per_cluster,
    }
}

/// IPW estimates over all policies: μ(z,α) = (1/I) Σ_i cluster_ipw, equal
/// cluster weighting, plus effects and empirical standard errors.
pub fn estimate(
    study: &Study,
    policies: &[AllocationPolicy],
    cps: &dyn CpsProvider,
    spillover_arm: u8,
) -> Result<EstimandReport> {
    if study.clusters.is_empty() {
        return Err(Error::TooFewObservations {
            needed: 1,
            found: 0,
        });
    }
    if policies.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one allocation policy is required".to_string(),
        ));
    }
    if spillover_arm > 1 {
        return Err(Error::InvalidConfig(format!(
            "spillover arm must be 0 or 1, got {spillover_arm}"
        )));
    }
    let rows: Vec<Vec<f64>> = study
        .clusters
        .par_iter()
        .map(|cluster| {
            let observed = cluster.observed_treatments();
            let prob = cps.prob(cluster, &observed)?;
            check_propensity(cluster, prob)?;
            let outcomes = collect_outcomes(cluster)?;
            let mut row = Vec::with_capacity(2 * policies.len());
            for z in [0u8, 1] {
                for policy in policies {
                    row.push(ipw_sum(cluster, &observed, &outcomes, z, *policy) / prob);
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let alphas: Vec<f64> = policies.iter().map(|p| p.alpha).collect();
    let ids = study.clusters.iter().map(|c| c.id.clone()).collect();
    Ok(assemble_report(ids, rows, &alphas, spillover_arm))
}

/// Exact policy-averaged expectation of cluster_ipw under the supplied CPS,
/// averaged over clusters, by full 2^{n_i} enumeration. Two summation
/// orders are computed and cross-checked: the outer expectation over
/// treatment vectors of the IPW term, and the direct policy average of
/// potential outcomes (in which the CPS cancels algebraically).
pub fn true_mu_enumeration(
    study: &Study,
    table: &PotentialOutcomeTable,
    cps: &dyn CpsProvider,
    z: u8,
    policy: AllocationPolicy,
) -> Result<f64> {
    if z > 1 {
        return Err(Error::InvalidConfig(format!(
            "treatment arm must be 0 or 1, got {z}"
        )));
    }
    if study.clusters.is_empty() {
        return Err(Error::TooFewObservations {
            needed: 1,
            found: 0,
        });
    }
    let per: Vec<f64> = study
        .clusters
        .iter()
        .map(|c| cluster_true_mu(c, table, cps, z, policy))
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&per) / per.len() as f64)
}

fn cluster_true_mu(
    cluster: &Cluster,
    table: &PotentialOutcomeTable,
    cps: &dyn CpsProvider,
    z: u8,
    policy: AllocationPolicy,
) -> Result<f64> {
    let n = cluster.size();
    if n > ENUM_LIMIT {
        return Err(Error::ClusterTooLarge {
            cluster_id: cluster.id.clone(),
            size: n,
            limit: ENUM_LIMIT,
        });
    }
    let ctable = table.clusters.get(&cluster.id).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "no potential-outcome table for cluster '{}'",
            cluster.id
        ))
    })?;
    // route A: E_w[cluster_ipw] through the real estimator code
    let mut route_a = 0.0;
    for w in all_treatment_vectors(n) {
        let outcomes = ctable.outcomes.get(&w.values).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "potential-outcome table for cluster '{}' lacks {:?}",
                cluster.id, w.values
            ))
        })?;
        let hypothetical = Cluster {
            id: cluster.id.clone(),
            units: cluster
                .units
                .iter()
                .zip(&w.values)
                .zip(outcomes)
                .map(|((u, &t), &y)| Unit {
                    cluster_id: u.cluster_id.clone(),
                    unit_index: u.unit_index,
                    treatment: t,
                    outcome: Some(y),
                    covariates: u.covariates.clone(),
                })
                .collect(),
        };
        let p = cps.prob(&hypothetical, &w)?;
        check_propensity(&hypothetical, p)?;
        route_a += p * cluster_ipw(&hypothetical, z, policy, cps)?;
    }
    // route B: direct policy average, no CPS
    let mut route_b = 0.0;
    for j in 0..n {
        for peers in all_treatment_vectors(n.saturating_sub(1)) {
            let mut w = Vec::with_capacity(n);
            w.extend_from_slice(&peers.values[..j]);
            w.push(z);
            w.extend_from_slice(&peers.values[j..]);
            let outcomes = ctable.outcomes.get(&w).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "potential-outcome table for cluster '{}' lacks {w:?}",
                    cluster.id
                ))
            })?;
            route_b += policy_weight(&peers.values, policy) * outcomes[j];
        }
    }
    route_b /= n as f64;
    if (route_a - route_b).abs() > 1e-9 * (1.0 + route_b.abs()) {
        return Err(Error::InvalidConfig(format!(
            "enumeration routes disagree for cluster '{}': {route_a} vs {route_b}",
            cluster.id
        )));
    }
    Ok(route_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::expit;
    use crate::numeric::dot;
    use crate::simulation::ClusterTable;
    use crate::study::validate_study;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn policy(alpha: f64) -> AllocationPolicy {
        AllocationPolicy::new(alpha).unwrap()
    }

    #[test]
    fn policy_validation() {
        assert!(AllocationPolicy::new(0.5).is_ok());
        for bad in [0.0, 1.0, -0.1, 1.3, f64::NAN] {
            assert!(matches!(
                AllocationPolicy::new(bad),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn policy_weight_basics() {
        let p = policy(0.5);
        assert_eq!(policy_weight(&[], p), 1.0);
        assert_eq!(policy_weight(&[1, 0, 1], p), 0.125);
        let q = policy(0.37);
        for m in 0..=6 {
            let total: f64 = all_treatment_vectors(m)
                .iter()
                .map(|w| policy_weight(&w.values, q))
                .sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    fn hand_cluster() -> Cluster {
        Cluster {
            id: "c".to_string(),
            units: vec![
                Unit {
                    cluster_id: "c".to_string(),
                    unit_index: 0,
                    treatment: 1,
                    outcome: Some(3.0),
                    covariates: vec![],
                },
                Unit {
                    cluster_id: "c".to_string(),
                    unit_index: 1,
                    treatment: 0,
                    outcome: Some(5.0),
                    covariates: vec![],
                },
            ],
        }
    }

    fn uniform_table(cluster: &Cluster) -> TableCps {
        let n = cluster.size();
        let probs = all_treatment_vectors(n)
            .into_iter()
            .map(|w| ((cluster.id.clone(), w.values), 0.25_f64.powf(0.0) / 2f64.powi(n as i32)))
            .collect();
        TableCps { probs }
    }

    #[test]
    fn hand_example() {
        let cluster = hand_cluster();
        let cps = uniform_table(&cluster);
        let got = cluster_ipw(&cluster, 1, policy(0.5), &cps).unwrap();
        assert_eq!(got, 3.0);
        // z=0 picks unit 2: (1/2)·[1·0.5·5/0.25] = 5.0
        let got0 = cluster_ipw(&cluster, 0, policy(0.5), &cps).unwrap();
        assert_eq!(got0, 5.0);
    }

    #[test]
    fn singleton_reduces_to_classical_ipw() {
        let cluster = Cluster {
            id: "s".to_string(),
            units: vec![Unit {
                cluster_id: "s".to_string(),
                unit_index: 0,
                treatment: 1,
                outcome: Some(7.0),
                covariates: vec![],
            }],
        };
        let mut probs = BTreeMap::new();
        probs.insert(("s".to_string(), vec![1]), 0.7);
        probs.insert(("s".to_string(), vec![0]), 0.3);
        let cps = TableCps { probs };
        let got = cluster_ipw(&cluster, 1, policy(0.4), &cps).unwrap();
        assert_abs_diff_eq!(got, 7.0 / 0.7, epsilon = 1e-12);
        assert_eq!(cluster_ipw(&cluster, 0, policy(0.4), &cps).unwrap(), 0.0);
    }

    #[test]
    fn missing_outcome_and_zero_propensity() {
        let mut cluster = hand_cluster();
        cluster.units[1].outcome = None;
        let cps = uniform_table(&cluster);
        assert!(matches!(
            cluster_ipw(&cluster, 1, policy(0.5), &cps),
            Err(Error::MissingOutcome { ref cluster_id, unit: 1 }) if cluster_id == "c"
        ));
        let cluster = hand_cluster();
        let mut probs = BTreeMap::new();
        for w in all_treatment_vectors(2) {
            probs.insert(("c".to_string(), w.values), 0.0);
        }
        let cps = TableCps { probs };
        assert!(matches!(
            cluster_ipw(&cluster, 1, policy(0.5), &cps),
            Err(Error::ZeroPropensity(_))
        ));
    }

    fn random_study(rng: &mut ChaCha20Rng, clusters: usize, max_n: usize, p: usize) -> Study {
        let clusters: Vec<Cluster> = (0..clusters)
            .map(|i| {
                let id = format!("{}", i + 1);
                let ni = rng.random_range(1..=max_n);
                let units = (0..ni)
                    .map(|j| Unit {
                        cluster_id: id.clone(),
                        unit_index: j,
                        treatment: u8::from(rng.random_bool(0.5)),
                        outcome: Some(rng.random_range(-2.0..2.0)),
                        covariates: (0..p).map(|_| StandardNormal.sample(rng)).collect(),
                    })
                    .collect();
                Cluster { id, units }
            })
            .collect();
        validate_study(Study { clusters, p }).unwrap()
    }

    #[test]
    fn report_identities_hold_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let study = random_study(&mut rng, 12, 5, 2);
        let cps = MixedCps::from_parameters(vec![0.4, -0.2], 0.6, 30).unwrap();
        let policies = [policy(0.3), policy(0.5), policy(0.7)];
        let report = estimate(&study, &policies, &cps, 0).unwrap();
        assert_eq!(report.clusters, 12);
        assert_eq!(report.mu.len(), 6);
        assert_eq!(report.spillover_effect.len(), 9);
        for d in &report.direct_effect {
            let mu1 = report.mu_value(1, d.alpha).unwrap();
            let mu0 = report.mu_value(0, d.alpha).unwrap();
            assert_eq!(d.value, mu1 - mu0);
        }
        for s in &report.spillover_effect {
            let a = report.mu_value(0, s.alpha).unwrap();
            let b = report.mu_value(0, s.alpha_prime).unwrap();
            assert_eq!(s.value, a - b);
            if s.alpha == s.alpha_prime {
                assert_eq!(s.value, 0.0);
                assert_eq!(s.std_error, 0.0);
            }
        }
        // variance definition: empirical variance of contributions over I
        let entry = &report.mu[0];
        let contribs: Vec<f64> = report
            .per_cluster
            .iter()
            .map(|r| r.contributions[0])
            .collect();
        let mean = contribs.iter().sum::<f64>() / contribs.len() as f64;
        let var = contribs.iter().map(|c| (c - mean).powi(2)).sum::<f64>()
            / (contribs.len() - 1) as f64;
        assert_abs_diff_eq!(
            entry.std_error,
            (var / contribs.len() as f64).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn spillover_arm_flag_switches_arm() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let study = random_study(&mut rng, 10, 4, 1);
        let cps = MixedCps::from_parameters(vec![0.3], 0.4, 30).unwrap();
        let policies = [policy(0.3), policy(0.7)];
        let on_one = estimate(&study, &policies, &cps, 1).unwrap();
        for s in &on_one.spillover_effect {
            let a = on_one.mu_value(1, s.alpha).unwrap();
            let b = on_one.mu_value(1, s.alpha_prime).unwrap();
            assert_eq!(s.value, a - b);
        }
        assert!(matches!(
            estimate(&study, &policies, &cps, 2),
            Err(Error::InvalidConfig(_))
        ));
    }

    /// Flipping every treatment and relabeling the CPS maps μ(z,α) to
    /// μ(1−z, 1−α), so DE changes sign at the mirrored policy.
    #[test]
    fn relabeling_antisymmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let study = random_study(&mut rng, 8, 4, 0);
        let mut probs = BTreeMap::new();
        let mut rng2 = ChaCha20Rng::seed_from_u64(53);
        for cluster in &study.clusters {
            let vecs = all_treatment_vectors(cluster.size());
            let raw: Vec<f64> = vecs.iter().map(|_| rng2.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for (w, r) in vecs.into_iter().zip(raw) {
                probs.insert((cluster.id.clone(), w.values), r / total);
            }
        }
        let flipped_probs = probs
            .iter()
            .map(|((id, w), &p)| {
                let fw: Vec<u8> = w.iter().map(|&z| 1 - z).collect();
                ((id.clone(), fw), p)
            })
            .collect();
        let cps = TableCps { probs };
        let flipped_cps = TableCps {
            probs: flipped_probs,
        };
        let mut flipped = study.clone();
        for c in &mut flipped.clusters {
            for u in &mut c.units {
                u.treatment = 1 - u.treatment;
            }
        }
        let alpha = 0.3;
        let report = estimate(&study, &[policy(alpha)], &cps, 0).unwrap();
        let mirrored = estimate(&flipped, &[policy(1.0 - alpha)], &flipped_cps, 0).unwrap();
        assert_abs_diff_eq!(
            report.mu_value(1, alpha).unwrap(),
            mirrored.mu_value(0, 1.0 - alpha).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            report.mu_value(0, alpha).unwrap(),
            mirrored.mu_value(1, 1.0 - alpha).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            report.direct_value(alpha).unwrap(),
            -mirrored.direct_value(1.0 - alpha).unwrap(),
            epsilon = 1e-12
        );
    }

    fn random_table(rng: &mut ChaCha20Rng, study: &Study) -> PotentialOutcomeTable {
        let clusters = study
            .clusters
            .iter()
            .map(|c| {
                let outcomes = all_treatment_vectors(c.size())
                    .into_iter()
                    .map(|w| {
                        let ys = (0..c.size()).map(|_| rng.random_range(-3.0..3.0)).collect();
                        (w.values, ys)
                    })
                    .collect();
                (c.id.clone(), ClusterTable { outcomes })
            })
            .collect();
        PotentialOutcomeTable {
            clusters,
            noiseless: true,
        }
    }

    #[test]
    fn enumeration_routes_agree_and_unbiasedness_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        let study = random_study(&mut rng, 10, 8, 2);
        let table = random_table(&mut rng, &study);
        let cps = MixedCps::from_parameters(vec![0.5, -0.25], 1.0, 30).unwrap();
        for (z, alpha) in [(1u8, 0.5), (0u8, 0.3), (1u8, 0.7)] {
            let mu = true_mu_enumeration(&study, &table, &cps, z, policy(alpha)).unwrap();
            // independent check: expectation of cluster_ipw over the CPS law
            let mut manual = 0.0;
            for cluster in &study.clusters {
                let ctable = &table.clusters[&cluster.id];
                let mut e = 0.0;
                for w in all_treatment_vectors(cluster.size()) {
                    let ys = &ctable.outcomes[&w.values];
                    let mut hyp = cluster.clone();
                    for ((u, &t), &y) in hyp.units.iter_mut().zip(&w.values).zip(ys) {
                        u.treatment = t;
                        u.outcome = Some(y);
                    }
                    let p = cps.prob(&hyp, &w).unwrap();
                    e += p * cluster_ipw(&hyp, z, policy(alpha), &cps).unwrap();
                }
                manual += e;
            }
            manual /= study.clusters.len() as f64;
            assert_abs_diff_eq!(mu, manual, epsilon = 1e-10);
        }
    }

    #[test]
    fn constant_outcomes_enumerate_to_the_constant() {
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let study = random_study(&mut rng, 5, 6, 1);
        let clusters = study
            .clusters
            .iter()
            .map(|c| {
                let outcomes = all_treatment_vectors(c.size())
                    .into_iter()
                    .map(|w| (w.values, vec![4.25; c.size()]))
                    .collect();
                (c.id.clone(), ClusterTable { outcomes })
            })
            .collect();
        let table = PotentialOutcomeTable {
            clusters,
            noiseless: true,
        };
        let cps = MixedCps::from_parameters(vec![0.2], 0.5, 30).unwrap();
        let mu = true_mu_enumeration(&study, &table, &cps, 1, policy(0.42)).unwrap();
        assert_abs_diff_eq!(mu, 4.25, epsilon = 1e-12);
    }

    #[test]
    fn enumeration_rejects_large_clusters() {
        let id = "big".to_string();
        let units = (0..13)
            .map(|j| Unit {
                cluster_id: id.clone(),
                unit_index: j,
                treatment: 0,
                outcome: Some(0.0),
                covariates: vec![],
            })
            .collect();
        let study = Study {
            clusters: vec![Cluster { id, units }],
            p: 0,
        };
        let table = PotentialOutcomeTable {
            clusters: BTreeMap::new(),
            noiseless: true,
        };
        let cps = MixedCps::from_parameters(vec![], 0.5, 30).unwrap();
        assert!(matches!(
            true_mu_enumeration(&study, &table, &cps, 1, policy(0.5)),
            Err(Error::ClusterTooLarge { size: 13, limit: 12, .. })
        ));
    }

    #[test]
    fn monte_carlo_mean_matches_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(56);
        let study = random_study(&mut rng, 1, 3, 1);
        let cluster = &study.clusters[0];
        let table = random_table(&mut rng, &study);
        let cps = MixedCps::from_parameters(vec![0.6], 0.8, 30).unwrap();
        let pol = policy(0.4);
        let truth = true_mu_enumeration(&study, &table, &cps, 1, pol).unwrap();
        let vecs = all_treatment_vectors(cluster.size());
        let probs: Vec<f64> = vecs.iter().map(|w| cps.prob(cluster, w).unwrap()).collect();
        let ctable = &table.clusters[&cluster.id];
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut idx = vecs.len() - 1;
            for (k, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    idx = k;
                    break;
                }
            }
            let w = &vecs[idx];
            let ys = &ctable.outcomes[&w.values];
            let mut hyp = cluster.clone();
            for ((unit, &t), &y) in hyp.units.iter_mut().zip(&w.values).zip(ys) {
                unit.treatment = t;
                unit.outcome = Some(y);
            }
            let v = cluster_ipw(&hyp, 1, pol, &cps).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / draws as f64;
        let var = (sumsq / draws as f64 - mean * mean) / draws as f64;
        let band = 4.0 * var.sqrt();
        assert!(
            (mean - truth).abs() < band,
            "MC mean {mean} vs enumeration {truth} (band {band})"
        );
    }

    #[test]
    fn providers_normalize() {
        let mut rng = ChaCha20Rng::seed_from_u64(57);
        let study = random_study(&mut rng, 4, 6, 2);
        let mixed = MixedCps::from_parameters(vec![0.5, -0.25], 1.2, 30).unwrap();
        let eta = EtaCps::from_study(&study, 0.9, 30, |u| {
            (2.0 * u.covariates[0]).sin() + 0.5 * u.covariates[0]
        })
        .unwrap();
        let providers: [&dyn CpsProvider; 2] = [&mixed, &eta];
        for provider in providers {
            for cluster in &study.clusters {
                let total: f64 = all_treatment_vectors(cluster.size())
                    .iter()
                    .map(|w| provider.prob(cluster, w).unwrap())
                    .sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn report_serializes_to_json_and_csv() {
        let mut rng = ChaCha20Rng::seed_from_u64(58);
        let study = random_study(&mut rng, 6, 4, 1);
        let cps = MixedCps::from_parameters(vec![0.3], 0.5, 30).unwrap();
        let policies = [policy(0.3), policy(0.7)];
        let report = estimate(&study, &policies, &cps, 0).unwrap();
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: EstimandReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        report.save_csv(&path).unwrap();
        let csv = std::fs::read_to_string(&path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("estimand,z,alpha,alpha_prime,value,std_error")
        );
        let rows: Vec<&str> = lines.collect();
        // 4 mu + 2 direct + 4 spillover
        assert_eq!(rows.len(), 10);
        let first: Vec<&str> = rows[0].split(',').collect();
        assert_eq!(first[0], "mu");
        assert_eq!(first[1], "0");
        let parsed: f64 = first[4].parse().unwrap();
        assert_eq!(parsed, report.mu[0].value);
    }

    /// End-to-end sanity on a design whose truth is computable: with the
    /// exact model CPS and outcomes from a linear interference model, the
    /// IPW estimate should land near the closed-form effects.
    #[test]
    fn ipw_tracks_linear_truth() {
        let tau = 2.0;
        let delta = 1.5;
        let beta = [0.5, -0.25];
        let sigma2: f64 = 0.8;
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        let clusters: Vec<Cluster> = (0..800)
            .map(|i| {
                let id = format!("{}", i + 1);
                let ni = rng.random_range(2..=4);
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = sigma2.sqrt() * noise;
                let xs: Vec<Vec<f64>> = (0..ni)
                    .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect();
                let zs: Vec<u8> = xs
                    .iter()
                    .map(|x| u8::from(rng.random::<f64>() < expit(dot(x, &beta) + v)))
                    .collect();
                let units = (0..ni)
                    .map(|j| {
                        let peers: usize =
                            zs.iter().enumerate().filter(|&(k, &z)| k != j && z == 1).count();
                        let y = tau * f64::from(zs[j])
                            + delta * peers as f64 / (ni - 1) as f64
                            + 0.3 * xs[j][0];
                        Unit {
                            cluster_id: id.clone(),
                            unit_index: j,
                            treatment: zs[j],
                            outcome: Some(y),
                            covariates: xs[j].clone(),
                        }
                    })
                    .collect();
                Cluster { id, units }
            })
            .collect();
        let study = validate_study(Study { clusters, p: 2 }).unwrap();
        let cps = MixedCps::from_parameters(beta.to_vec(), sigma2, 30).unwrap();
        let policies = [policy(0.3), policy(0.7)];
        let report = estimate(&study, &policies, &cps, 0).unwrap();
        for d in &report.direct_effect {
            assert!(
                (d.value - tau).abs() < 4.0 * d.std_error + 0.2,
                "DE({}) = {} ± {}",
                d.alpha,
                d.value,
                d.std_error
            );
        }
        let s = report.spillover_value(0.7, 0.3).unwrap();
        let se = report
            .spillover_effect
            .iter()
            .find(|e| e.alpha == 0.7 && e.alpha_prime == 0.3)
            .unwrap()
            .std_error;
        assert!(
            (s - delta * 0.4).abs() < 4.0 * se + 0.2,
            "SE(0.7,0.3) = {s} ± {se}"
        );
    }
}
