//! Synthetic study generation with a known cluster-level treatment law and a
//! linear-in-peer-proportion outcome model, plus exact policy-averaged truth
//! computed from enumerated potential outcomes. Everything is deterministic
//! given the seed: one named sub-stream per cluster, so generation order and
//! thread count cannot change the draws.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimands::{assemble_report, policy_weight, AllocationPolicy, EstimandReport, ENUM_LIMIT};
use crate::learners::expit;
use crate::numeric::dot;
use crate::study::{all_treatment_vectors, validate_study, Cluster, Study, Unit};

/// Law of the cluster size n_i.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeLaw {
    Fixed { n: usize },
    Uniform { lo: usize, hi: usize },
}

impl SizeLaw {
    fn validate(&self) -> Result<()> {
        match *self {
            SizeLaw::Fixed { n } if n >= 1 => Ok(()),
            SizeLaw::Fixed { n } => Err(Error::InvalidConfig(format!(
                "fixed cluster size must be at least 1, got {n}"
            ))),
            SizeLaw::Uniform { lo, hi } if lo >= 1 && lo <= hi => Ok(()),
            SizeLaw::Uniform { lo, hi } => Err(Error::InvalidConfig(format!(
                "uniform size range needs 1 <= lo <= hi, got [{lo}, {hi}]"
            ))),
        }
    }

    fn draw(&self, rng: &mut ChaCha20Rng) -> usize {
        match *self {
            SizeLaw::Fixed { n } => n,
            SizeLaw::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

/// Unit covariates are drawn i.i.d. per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    #[default]
    StdNormal,
}

/// True unit-level linear predictor η_ij before the cluster effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropensityTruth {
    Linear { beta: Vec<f64> },
    Nonlinear { name: String },
}

/// Named nonlinear truths act on the first covariate.
pub fn nonlinear_truth(name: &str) -> Option<fn(f64) -> f64> {
    match name {
        "sin2x_plus_half_x" => Some(|x| (2.0 * x).sin() + 0.5 * x),
        "sin2x" => Some(|x| (2.0 * x).sin()),
        _ => None,
    }
}

impl PropensityTruth {
    fn validate(&self, p: usize) -> Result<()> {
        match self {
            PropensityTruth::Linear { beta } => {
                if beta.len() != p {
                    return Err(Error::InvalidConfig(format!(
                        "propensity beta has length {}, config says p = {p}",
                        beta.len()
                    )));
                }
                Ok(())
            }
            PropensityTruth::Nonlinear { name } => {
                if nonlinear_truth(name).is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "unknown nonlinear propensity truth '{name}'"
                    )));
                }
                if p == 0 {
                    return Err(Error::InvalidConfig(
                        "nonlinear propensity truth needs at least one covariate".to_string(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn eta(&self, covariates: &[f64]) -> Result<f64> {
        match self {
            PropensityTruth::Linear { beta } => {
                if beta.len() != covariates.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "truth beta has length {}, unit has {} covariates",
                        beta.len(),
                        covariates.len()
                    )));
                }
                Ok(dot(covariates, beta))
            }
            PropensityTruth::Nonlinear { name } => {
                let f = nonlinear_truth(name).ok_or_else(|| {
                    Error::InvalidConfig(format!("unknown nonlinear propensity truth '{name}'"))
                })?;
                let x = covariates.first().ok_or_else(|| {
                    Error::DimensionMismatch(
                        "nonlinear propensity truth needs at least one covariate".to_string(),
                    )
                })?;
                Ok(f(*x))
            }
        }
    }
}

/// Y_ij = intercept + τ z_ij + δ · (treated peers)/(n_i − 1, or 1 when
/// n_i = 1) + X_ij'λ + noise_sd · ε_ij.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeModel {
    pub intercept: f64,
    pub tau: f64,
    pub delta: f64,
    pub lambda: Vec<f64>,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub clusters: usize,
    pub size_law: SizeLaw,
    pub p: usize,
    #[serde(default)]
    pub covariate_law: CovariateLaw,
    pub propensity_truth: PropensityTruth,
    pub sigma2_v: f64,
    pub outcome_model: OutcomeModel,
    pub seed: u64,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::InvalidConfig(
                "at least one cluster is required".to_string(),
            ));
        }
        self.size_law.validate()?;
        self.propensity_truth.validate(self.p)?;
        if !(self.sigma2_v.is_finite() && self.sigma2_v >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma2_v must be finite and nonnegative, got {}",
                self.sigma2_v
            )));
        }
        if self.outcome_model.lambda.len() != self.p {
            return Err(Error::InvalidConfig(format!(
                "outcome lambda has length {}, config says p = {}",
                self.outcome_model.lambda.len(),
                self.p
            )));
        }
        if !(self.outcome_model.noise_sd.is_finite() && self.outcome_model.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sd must be finite and nonnegative, got {}",
                self.outcome_model.noise_sd
            )));
        }
        Ok(())
    }
}

/// Mean potential outcomes for every treatment vector of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTable {
    pub outcomes: BTreeMap<Vec<u8>, Vec<f64>>,
}

/// Tables for every cluster small enough to enumerate (n_i <= 12). The
/// entries are noiseless model means; `noiseless` records whether the
/// generating config also had noise_sd = 0, i.e. whether observed outcomes
/// coincide with the table at the realized vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomeTable {
    pub clusters: BTreeMap<String, ClusterTable>,
    pub noiseless: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStudy {
    pub study: Study,
    /// Realized cluster effects V_i, in cluster order.
    pub random_effects: Vec<f64>,
    pub truth: DgpConfig,
    pub potential_outcomes: PotentialOutcomeTable,
}

fn mean_outcomes(w: &[u8], xs: &[Vec<f64>], model: &OutcomeModel) -> Vec<f64> {
    let n = w.len();
    let denom = n.saturating_sub(1).max(1) as f64;
    let treated: usize = w.iter().map(|&z| usize::from(z)).sum();
    (0..n)
        .map(|j| {
            let peers = (treated - usize::from(w[j])) as f64;
            model.intercept
                + model.tau * f64::from(w[j])
                + model.delta * peers / denom
                + dot(&xs[j], &model.lambda)
        })
        .collect()
}

/// Draw a study from the configured law. Cluster i uses sub-stream i + 1 of
/// a ChaCha20 generator seeded with `config.seed`; stream 0 only draws the
/// cluster sizes. Within a cluster the order is: V_i, then per unit the
/// covariates followed by the treatment, then per unit the outcome noise.
pub fn generate(config: &DgpConfig) -> Result<SimulatedStudy> {
    config.validate()?;
    let mut master = ChaCha20Rng::seed_from_u64(config.seed);
    let sizes: Vec<usize> = (0..config.clusters)
        .map(|_| config.size_law.draw(&mut master))
        .collect();
    let sigma_v = config.sigma2_v.sqrt();
    let drawn: Vec<(Cluster, f64, Option<ClusterTable>)> = sizes
        .par_iter()
        .enumerate()
        .map(|(i, &ni)| {
            let id = format!("{}", i + 1);
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            let raw: f64 = StandardNormal.sample(&mut rng);
            let v = sigma_v * raw;
            let mut xs: Vec<Vec<f64>> = Vec::with_capacity(ni);
            let mut zs: Vec<u8> = Vec::with_capacity(ni);
            for _ in 0..ni {
                let x: Vec<f64> = (0..config.p)
                    .map(|_| {
                        let draw: f64 = StandardNormal.sample(&mut rng);
                        draw
                    })
                    .collect();
                let eta = config
                    .propensity_truth
                    .eta(&x)
                    .expect("validated against p");
                let z = u8::from(rng.random::<f64>() < expit(eta + v));
                xs.push(x);
                zs.push(z);
            }
            let means = mean_outcomes(&zs, &xs, &config.outcome_model);
            let units = (0..ni)
                .map(|j| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    Unit {
                        cluster_id: id.clone(),
                        unit_index: j,
                        treatment: zs[j],
                        outcome: Some(means[j] + config.outcome_model.noise_sd * eps),
                        covariates: xs[j].clone(),
                    }
                })
                .collect();
            let table = (ni <= ENUM_LIMIT).then(|| {
                let outcomes = all_treatment_vectors(ni)
                    .into_iter()
                    .map(|w| {
                        let means = mean_outcomes(&w.values, &xs, &config.outcome_model);
                        (w.values, means)
                    })
                    .collect();
                ClusterTable { outcomes }
            });
            (Cluster { id, units }, v, table)
        })
        .collect();
    let mut clusters = Vec::with_capacity(drawn.len());
    let mut random_effects = Vec::with_capacity(drawn.len());
    let mut tables = BTreeMap::new();
    for (cluster, v, table) in drawn {
        if let Some(t) = table {
            tables.insert(cluster.id.clone(), t);
        }
        random_effects.push(v);
        clusters.push(cluster);
    }
    let study = validate_study(Study {
        clusters,
        p: config.p,
    })?;
    Ok(SimulatedStudy {
        study,
        random_effects,
        truth: config.clone(),
        potential_outcomes: PotentialOutcomeTable {
            clusters: tables,
            noiseless: config.outcome_model.noise_sd == 0.0,
        },
    })
}

/// Policy average of table outcomes for one cluster and arm, no CPS:
/// (1/n) Σ_j Σ_{peer vectors} policy_weight · R_ij(z at j, peers).
///
/// Each unit's sum is anchored at its zero-peer outcome, exploiting that the
/// weights sum to one: Σ π·R = R₀ + Σ π·(R − R₀). Roundoff then scales with
/// the peer-effect spread, so outcomes that ignore peers average exactly to
/// themselves for every α.
fn policy_average(
    cluster_id: &str,
    ctable: &ClusterTable,
    n: usize,
    z: u8,
    policy: AllocationPolicy,
) -> Result<f64> {
    let missing = |w: &[u8]| {
        Error::InvalidConfig(format!(
            "potential-outcome table for cluster '{cluster_id}' lacks {w:?}"
        ))
    };
    let mut total = 0.0;
    for j in 0..n {
        let mut base_w = vec![0u8; n];
        base_w[j] = z;
        let baseline = ctable.outcomes.get(&base_w).ok_or_else(|| missing(&base_w))?[j];
        let mut shifted = 0.0;
        for peers in all_treatment_vectors(n.saturating_sub(1)) {
            let mut w = Vec::with_capacity(n);
            w.extend_from_slice(&peers.values[..j]);
            w.push(z);
            w.extend_from_slice(&peers.values[j..]);
            let outcomes = ctable.outcomes.get(&w).ok_or_else(|| missing(&w))?;
            shifted += policy_weight(&peers.values, policy) * (outcomes[j] - baseline);
        }
        total += baseline + shifted;
    }
    Ok(total / n as f64)
}

/// Exact estimands by pure policy averaging of the potential-outcome table.
/// No propensity scores are involved. Requires a noiseless table covering
/// every cluster.
pub fn true_estimands(
    sim: &SimulatedStudy,
    policies: &[AllocationPolicy],
    spillover_arm: u8,
) -> Result<EstimandReport> {
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
    if !sim.potential_outcomes.noiseless {
        return Err(Error::NoisyTable);
    }
    let mut rows = Vec::with_capacity(sim.study.clusters.len());
    let mut ids = Vec::with_capacity(sim.study.clusters.len());
    for cluster in &sim.study.clusters {
        let n = cluster.size();
        let ctable = sim.potential_outcomes.clusters.get(&cluster.id).ok_or_else(|| {
            Error::ClusterTooLarge {
                cluster_id: cluster.id.clone(),
                size: n,
                limit: ENUM_LIMIT,
            }
        })?;
        let mut row = Vec::with_capacity(2 * policies.len());
        for z in [0u8, 1] {
            for policy in policies {
                row.push(policy_average(&cluster.id, ctable, n, z, *policy)?);
            }
        }
        ids.push(cluster.id.clone());
        rows.push(row);
    }
    let alphas: Vec<f64> = policies.iter().map(|p| p.alpha()).collect();
    Ok(assemble_report(ids, rows, &alphas, spillover_arm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffect {
    pub cluster_id: String,
    pub v: f64,
}

/// Truth parameters and realized cluster effects, stored next to the study
/// data so downstream estimation can use the exact treatment law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSidecar {
    pub config: DgpConfig,
    pub random_effects: Vec<RandomEffect>,
}

impl SimulatedStudy {
    pub fn sidecar(&self) -> TruthSidecar {
        TruthSidecar {
            config: self.truth.clone(),
            random_effects: self
                .study
                .clusters
                .iter()
                .zip(&self.random_effects)
                .map(|(c, &v)| RandomEffect {
                    cluster_id: c.id.clone(),
                    v,
                })
                .collect(),
        }
    }
}

impl TruthSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
