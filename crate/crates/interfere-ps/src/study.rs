//! Hierarchical data model for clustered observational studies.
//!
//! A [`Study`] holds ordered clusters of ordered units. Within-cluster order
//! is meaningful and therefore explicit: files carry a `unit_id` column,
//! rows are grouped by `cluster_id` and sorted by ascending `unit_id`, and
//! the resulting 0-based position becomes [`Unit::unit_index`]. Types are
//! immutable after [`validate_study`] and safe to share across threads.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One study unit: treatment Z, optional outcome Y, covariate row X.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub cluster_id: String,
    /// 0-based position within the cluster.
    pub unit_index: usize,
    pub treatment: u8,
    /// Absent for design-only data; estimand operations require it.
    pub outcome: Option<f64>,
    pub covariates: Vec<f64>,
}

/// An interference set: units inside may affect each other, units outside
/// may not.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub units: Vec<Unit>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.units.len()
    }

    /// Covariate rows in unit order; the shape every cluster-level
    /// probability query expects.
    pub fn covariate_rows(&self) -> Vec<Vec<f64>> {
        self.units.iter().map(|u| u.covariates.clone()).collect()
    }

    /// The realized treatment vector z_i.
    pub fn observed_treatments(&self) -> TreatmentVector {
        TreatmentVector {
            values: self.units.iter().map(|u| u.treatment).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub clusters: Vec<Cluster>,
    /// Covariate dimension shared by every unit.
    pub p: usize,
}

impl Study {
    /// Total unit count n = Σ_i n_i.
    pub fn n(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    /// Flat view over all units in study order.
    pub fn units(&self) -> impl Iterator<Item = &Unit> {
        self.clusters.iter().flat_map(|c| c.units.iter())
    }
}

/// A candidate treatment configuration z_i ∈ {0,1}^{n_i} for one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentVector {
    pub values: Vec<u8>,
}

impl TreatmentVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if let Some(&v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryTreatment {
                cluster_id: String::new(),
                unit: values.iter().position(|&x| x == v).unwrap(),
                value: v as i64,
            });
        }
        Ok(TreatmentVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// All 2^n treatment vectors of length n, ordered by the integer whose j-th
/// bit is entry j. The fixed order makes enumeration sums reproducible.
pub fn all_treatment_vectors(n: usize) -> Vec<TreatmentVector> {
    assert!(n < 26, "enumeration over 2^{n} vectors is not tractable");
    (0..1usize << n)
        .map(|m| TreatmentVector {
            values: (0..n).map(|j| ((m >> j) & 1) as u8).collect(),
        })
        .collect()
}

/// Check every structural invariant and hand the study back unchanged.
pub fn validate_study(study: Study) -> Result<Study> {
    let mut seen = HashSet::new();
    for cluster in &study.clusters {
        if !seen.insert(cluster.id.clone()) {
            return Err(Error::DuplicateId(cluster.id.clone()));
        }
        if cluster.units.is_empty() {
            return Err(Error::EmptyCluster(cluster.id.clone()));
        }
        for (j, unit) in cluster.units.iter().enumerate() {
            if unit.cluster_id != cluster.id {
                return Err(Error::DimensionMismatch(format!(
                    "unit {} carries cluster id '{}' inside cluster '{}'",
                    j, unit.cluster_id, cluster.id
                )));
            }
            if unit.unit_index != j {
                return Err(Error::DimensionMismatch(format!(
                    "cluster '{}' position {} holds unit_index {}",
                    cluster.id, j, unit.unit_index
                )));
            }
            if unit.treatment > 1 {
                return Err(Error::NonBinaryTreatment {
                    cluster_id: cluster.id.clone(),
                    unit: j,
                    value: unit.treatment as i64,
                });
            }
            if unit.covariates.len() != study.p {
                return Err(Error::DimensionMismatch(format!(
                    "unit {} of cluster '{}' has {} covariates, study declares p={}",
                    j,
                    cluster.id,
                    unit.covariates.len(),
                    study.p
                )));
            }
            if unit.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue(format!(
                    "covariate of unit {} in cluster '{}'",
                    j, cluster.id
                )));
            }
            if let Some(y) = unit.outcome {
                if !y.is_finite() {
                    return Err(Error::NonFiniteValue(format!(
                        "outcome of unit {} in cluster '{}'",
                        j, cluster.id
                    )));
                }
            }
        }
    }
    Ok(study)
}

/// Reorder a cluster's units: position k of the result holds the unit that
/// sat at `perm[k]`. Indices are rewritten; payloads are untouched.
pub fn permute_cluster(cluster: &Cluster, perm: &[usize]) -> Result<Cluster> {
    let n = cluster.size();
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for cluster of size {n}",
            perm.len()
        )));
    }
    let mut hit = vec![false; n];
    for &k in perm {
        if k >= n || hit[k] {
            return Err(Error::InvalidPermutation(format!(
                "index {k} repeated or out of range"
            )));
        }
        hit[k] = true;
    }
    let units = perm
        .iter()
        .enumerate()
        .map(|(new_index, &old)| {
            let mut u = cluster.units[old].clone();
            u.unit_index = new_index;
            u
        })
        .collect();
    Ok(Cluster {
        id: cluster.id.clone(),
        units,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Json,
}

impl FileFormat {
    /// Infer from the extension; `.json` means JSON, anything else CSV.
    pub fn from_path(path: &Path) -> FileFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => FileFormat::Json,
            _ => FileFormat::Csv,
        }
    }
}

pub fn load_study(path: &Path, format: FileFormat) -> Result<Study> {
    match format {
        FileFormat::Csv => load_csv(path),
        FileFormat::Json => load_json(path),
    }
}

pub fn save_study(study: &Study, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => save_csv(study, path),
        FileFormat::Json => save_json(study, path),
    }
}

fn load_csv(path: &Path) -> Result<Study> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let fixed = ["cluster_id", "unit_id", "treatment", "outcome"];
    if headers.len() < fixed.len() || headers.iter().take(4).ne(fixed) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header must start with `cluster_id,unit_id,treatment,outcome`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let p = headers.len() - fixed.len();
    for (d, name) in headers.iter().skip(4).enumerate() {
        let want = format!("x{}", d + 1);
        if name != want {
            return Err(Error::Parse {
                line: 1,
                message: format!("covariate column {} must be named `{want}`, got `{name}`", d + 5),
            });
        }
    }

    // Grouping key is cluster_id in first-appearance order; rows of one
    // cluster need not be contiguous.
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, u64, u8, Option<f64>, Vec<f64>)>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |pos| pos.line());
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field {}", idx + 1),
            })
        };
        let cluster_id = field(0)?.to_string();
        let unit_id: i64 = parse_field(field(1)?, "unit_id", line)?;
        let treatment: u8 = parse_field(field(2)?, "treatment", line)?;
        let outcome_raw = field(3)?;
        let outcome = if outcome_raw.is_empty() {
            None
        } else {
            Some(parse_field(outcome_raw, "outcome", line)?)
        };
        let mut covariates = Vec::with_capacity(p);
        for d in 0..p {
            covariates.push(parse_field(field(4 + d)?, &format!("x{}", d + 1), line)?);
        }
        rows.entry(cluster_id.clone())
            .or_insert_with(|| {
                order.push(cluster_id.clone());
                Vec::new()
            })
            .push((unit_id, line, treatment, outcome, covariates));
    }

    let mut clusters = Vec::with_capacity(order.len());
    for id in order {
        let mut group = rows.remove(&id).unwrap();
        group.sort_by_key(|row| row.0);
        for pair in group.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Parse {
                    line: pair[1].1,
                    message: format!("duplicate unit_id {} in cluster '{id}'", pair[1].0),
                });
            }
        }
        let units = group
            .into_iter()
            .enumerate()
            .map(|(j, (_, _, treatment, outcome, covariates))| Unit {
                cluster_id: id.clone(),
                unit_index: j,
                treatment,
                outcome,
                covariates,
            })
            .collect();
        clusters.push(Cluster { id, units });
    }
    validate_study(Study { clusters, p })
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: u64) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {name} from `{raw}`"),
    })
}

fn save_csv(study: &Study, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let xs: Vec<String> = (1..=study.p).map(|d| format!("x{d}")).collect();
    writeln!(out, "cluster_id,unit_id,treatment,outcome,{}", xs.join(","))?;
    for cluster in &study.clusters {
        for unit in &cluster.units {
            let outcome = unit.outcome.map_or(String::new(), |y| format!("{y}"));
            let xs: Vec<String> = unit.covariates.iter().map(|x| format!("{x}")).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                cluster.id,
                unit.unit_index,
                unit.treatment,
                outcome,
                xs.join(",")
            )?;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonUnit {
    unit_id: i64,
    treatment: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    outcome: Option<f64>,
    covariates: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonCluster {
    id: String,
    units: Vec<JsonUnit>,
}

fn load_json(path: &Path) -> Result<Study> {
    let raw: Vec<JsonCluster> = serde_json::from_reader(std::fs::File::open(path)?)?;
    let p = raw
        .first()
        .and_then(|c| c.units.first())
        .map_or(0, |u| u.covariates.len());
    let mut clusters = Vec::with_capacity(raw.len());
    for jc in raw {
        let mut group: Vec<JsonUnit> = jc.units;
        group.sort_by_key(|u| u.unit_id);
        for pair in group.windows(2) {
            if pair[0].unit_id == pair[1].unit_id {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("duplicate unit_id {} in cluster '{}'", pair[1].unit_id, jc.id),
                });
            }
        }
        let units = group
            .into_iter()
            .enumerate()
            .map(|(j, u)| Unit {
                cluster_id: jc.id.clone(),
                unit_index: j,
                treatment: u.treatment,
                outcome: u.outcome,
                covariates: u.covariates,
            })
            .collect();
        clusters.push(Cluster { id: jc.id, units });
    }
    validate_study(Study { clusters, p })
}

fn save_json(study: &Study, path: &Path) -> Result<()> {
    let raw: Vec<JsonCluster> = study
        .clusters
        .iter()
        .map(|c| JsonCluster {
            id: c.id.clone(),
            units: c
                .units
                .iter()
                .map(|u| JsonUnit {
                    unit_id: u.unit_index as i64,
                    treatment: u.treatment,
                    outcome: u.outcome,
                    covariates: u.covariates.clone(),
                })
                .collect(),
        })
        .collect();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &raw)?;
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
pub(crate) fn test_cluster(id: &str, rows: &[(u8, Option<f64>, &[f64])]) -> Cluster {
    Cluster {
        id: id.to_string(),
        units: rows
            .iter()
            .enumerate()
            .map(|(j, (z, y, x))| Unit {
                cluster_id: id.to_string(),
                unit_index: j,
                treatment: *z,
                outcome: *y,
                covariates: x.to_vec(),
            })
            .collect(),
    }
}
