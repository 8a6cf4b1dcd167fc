//! Cluster-level propensity scores and inverse-probability-weighted effect
//! estimation under partial interference.
//!
//! Treatments are correlated within clusters through a latent Normal random
//! effect. The crate fits that model two ways (parametric mixed-effects
//! logistic regression, and a cross-fitted semiparametric variant that
//! inverts the marginal-to-conditional integral restriction), evaluates the
//! joint treatment-vector probability each implies, and feeds either into
//! Horvitz–Thompson estimators of direct and spillover effects under
//! Bernoulli allocation policies. Exact enumeration and adaptive-Simpson
//! oracles back every numerical claim in the test suite.
//!
//! Start with the `examples/` directory: each file is a runnable tour of one
//! capability (simulation, model fitting, cluster probabilities, cross-
//! fitting, the semiparametric procedure, exposure mappings, and effect
//! estimation).

pub mod cli;
pub mod crossfit;
pub mod error;
pub mod estimands;
pub mod learners;
pub mod mixed_model;
mod numeric;
mod optim;
pub mod quadrature;
pub mod semiparametric;
pub mod simulation;
pub mod study;

pub use error::{Error, Result};
