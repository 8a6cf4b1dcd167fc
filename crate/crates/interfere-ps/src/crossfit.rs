//! Cluster-level K-fold cross-fitting for the marginal propensity e(X).
//!
//! Entire clusters are dealt to folds; a unit's score always comes from a
//! learner whose training data excludes that unit's whole cluster. The
//! defining constraint is that units within a cluster never straddle folds.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::learners::{Observation, PropensityLearner};
use crate::study::Study;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_of_cluster: BTreeMap<String, usize>,
    pub k: usize,
    pub seed: u64,
}

/// Deal clusters to K folds: a seeded shuffle followed by a round-robin
/// pass, so fold sizes differ by at most one without rejection sampling.
pub fn assign_folds(study: &Study, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "cross-fitting needs at least 2 folds, got {k}"
        )));
    }
    let clusters = study.clusters.len();
    if k > clusters {
        return Err(Error::TooFewClusters { clusters, folds: k });
    }
    let mut ids: Vec<&str> = study.clusters.iter().map(|c| c.id.as_str()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let fold_of_cluster = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment {
        fold_of_cluster,
        k,
        seed,
    })
}

/// Out-of-fold scores ê(X_ij), keyed by (cluster id, unit index).
#[derive(Debug, Clone)]
pub struct OutOfFoldScores {
    pub ehat: BTreeMap<(String, usize), f64>,
    pub learner: String,
    pub folds: FoldAssignment,
}

impl OutOfFoldScores {
    pub fn get(&self, cluster_id: &str, unit_index: usize) -> Option<f64> {
        self.ehat
            .get(&(cluster_id.to_string(), unit_index))
            .copied()
    }

    /// CSV rows follow the study's cluster and unit order.
    pub fn save_csv(&self, study: &Study, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "cluster_id,unit_id,ehat,fold")?;
        for cluster in &study.clusters {
            let fold = self.folds.fold_of_cluster.get(&cluster.id).ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "cluster '{}' missing from the fold assignment",
                    cluster.id
                ))
            })?;
            for unit in &cluster.units {
                let ehat = self.get(&cluster.id, unit.unit_index).ok_or_else(|| {
                    Error::DimensionMismatch(format!(
                        "no score for unit {} of cluster '{}'",
                        unit.unit_index, cluster.id
                    ))
                })?;
                writeln!(out, "{},{},{},{}", cluster.id, unit.unit_index, ehat, fold)?;
            }
        }
        Ok(())
    }
}

/// Fit the learner K times on fold complements and score each cluster with
/// the one model that never saw it.
pub fn crossfit_propensity(
    study: &Study,
    folds: &FoldAssignment,
    learner: &(dyn PropensityLearner + Sync),
) -> Result<OutOfFoldScores> {
    for cluster in &study.clusters {
        if !folds.fold_of_cluster.contains_key(&cluster.id) {
            return Err(Error::DimensionMismatch(format!(
                "cluster '{}' missing from the fold assignment",
                cluster.id
            )));
        }
    }
    if folds.fold_of_cluster.len() != study.clusters.len() {
        return Err(Error::DimensionMismatch(format!(
            "fold assignment covers {} clusters, study has {}",
            folds.fold_of_cluster.len(),
            study.clusters.len()
        )));
    }

    let per_fold: Vec<Result<Vec<((String, usize), f64)>>> = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let mut train: Vec<Observation> = Vec::new();
            for cluster in &study.clusters {
                if folds.fold_of_cluster[&cluster.id] != fold {
                    for unit in &cluster.units {
                        train.push((unit.covariates.clone(), unit.treatment));
                    }
                }
            }
            let treated = train.iter().filter(|(_, z)| *z == 1).count();
            if treated == 0 || treated == train.len() {
                return Err(Error::DegenerateTrainingFold { fold });
            }
            let fitted = learner.fit(&train).map_err(|e| match e {
                Error::SeparationDetected(m) => Error::SeparationDetected(format!(
                    "training complement of fold {fold}: {m}"
                )),
                Error::NotConverged { iterations, context } => Error::NotConverged {
                    iterations,
                    context: format!("training complement of fold {fold}: {context}"),
                },
                other => other,
            })?;
            let mut scored = Vec::new();
            for cluster in &study.clusters {
                if folds.fold_of_cluster[&cluster.id] == fold {
                    for unit in &cluster.units {
                        scored.push((
                            (cluster.id.clone(), unit.unit_index),
                            fitted.predict(&unit.covariates),
                        ));
                    }
                }
            }
            Ok(scored)
        })
        .collect();

    let mut ehat = BTreeMap::new();
    for scored in per_fold {
        for (key, value) in scored? {
            ehat.insert(key, value);
        }
    }
    debug_assert_eq!(ehat.len(), study.n());
    Ok(OutOfFoldScores {
        ehat,
        learner: learner.name().to_string(),
        folds: folds.clone(),
    })
}
