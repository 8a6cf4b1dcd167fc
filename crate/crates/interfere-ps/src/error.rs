//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions (covariate length, vector length, rule variance).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Duplicate cluster id, or duplicate unit id within a cluster.
    #[error("duplicate id: {0}")]
    DuplicateId(String),

    /// A cluster with no units.
    #[error("cluster '{0}' is empty")]
    EmptyCluster(String),

    /// A treatment value outside {0, 1}.
    #[error("non-binary treatment {value} for unit {unit} of cluster '{cluster_id}'")]
    NonBinaryTreatment {
        cluster_id: String,
        unit: usize,
        value: i64,
    },

    /// A covariate or outcome that is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// Not a permutation of 0..n.
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    /// Perfect or quasi-perfect separation in a logistic fit.
    #[error("separation detected: {0}")]
    SeparationDetected(String),

    /// Design matrix not of full column rank.
    #[error("rank-deficient design matrix")]
    RankDeficient,

    /// An iterative procedure hit its iteration cap.
    #[error("failed to converge within {iterations} iterations ({context})")]
    NotConverged { iterations: usize, context: String },

    /// Too little data for the requested fit.
    #[error("too few observations: need at least {needed}, found {found}")]
    TooFewObservations { needed: usize, found: usize },

    /// Invalid quadrature node count.
    #[error("invalid node count {0}")]
    InvalidNodeCount(usize),

    /// An integrand evaluated to NaN or infinity at a node.
    #[error("non-finite integrand at v = {0}")]
    NonFiniteIntegrand(f64),

    /// Adaptive integrator exceeded its recursion depth.
    #[error("adaptive integration exceeded maximum recursion depth")]
    MaxDepthExceeded,

    /// A likelihood evaluation returned NaN or infinity.
    #[error("non-finite likelihood: {0}")]
    NonFiniteLikelihood(String),

    /// Unit index outside the cluster.
    #[error("unit index {index} out of range for cluster of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    /// Exposure level outside 0..=m.
    #[error("invalid exposure level {level} for {peers} peers")]
    InvalidExposureLevel { level: usize, peers: usize },

    /// Fewer clusters than folds.
    #[error("too few clusters: {clusters} clusters cannot fill {folds} folds")]
    TooFewClusters { clusters: usize, folds: usize },

    /// A cross-fitting training complement with single-valued treatment.
    #[error("degenerate training data for fold {fold}: all treatments identical")]
    DegenerateTrainingFold { fold: usize },

    /// Root bracketing failed in the integral-equation inversion.
    #[error("bracket failure: target {target} outside attainable range [{lo}, {hi}]")]
    BracketFailure { target: f64, lo: f64, hi: f64 },

    /// A queried unit has no fitted f value.
    #[error("missing f value for unit {unit} of cluster '{cluster_id}'")]
    MissingFValue { cluster_id: String, unit: usize },

    /// A unit without an outcome in an estimand computation.
    #[error("missing outcome for unit {unit} of cluster '{cluster_id}'")]
    MissingOutcome { cluster_id: String, unit: usize },

    /// A propensity of zero (or below) for an observed treatment vector.
    #[error("zero propensity for the observed treatment vector of cluster '{0}'")]
    ZeroPropensity(String),

    /// Cluster too large for exact enumeration or direct CPS evaluation.
    #[error("cluster '{cluster_id}' of size {size} exceeds the limit {limit}")]
    ClusterTooLarge {
        cluster_id: String,
        size: usize,
        limit: usize,
    },

    /// Potential-outcome table generated under outcome noise.
    #[error("potential-outcome table was generated with outcome noise; exact policy averaging requires a noiseless table")]
    NoisyTable,

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
