//! Causal demand estimation from probabilistic stated choices combined with
//! actual binary choices.
//!
//! Individuals report a choice probability in several hypothetical scenarios
//! and later make one actual binary choice. The stated probabilities carry
//! information about the individual's unobserved heterogeneity; grouping
//! individuals on moments of their stated choices and then fitting a grouped
//! probit on the actual choice removes the omitted-variable bias that
//! heterogeneity induces. From the grouped fit we compute the average
//! structural function, treatment effects, a mean-squared stated/actual bias
//! and counterfactual demand.
//!
//! Module map:
//!
//! - [`model`]: observed-data records, link function and panel validation.
//! - [`dgp`]: the synthetic data-generating process and simulation oracles.
//! - [`firststep`]: per-individual moments and k-means classification.
//! - [`secondstep`]: grouped probit maximum likelihood.
//! - [`estimands`]: ASF, treatment effects, MSB, counterfactuals and the
//!   naive/stated reference estimators.
//! - [`dimtest`]: diagnostics for the dimension of unobserved heterogeneity.
//! - [`harness`]: Monte Carlo study orchestration.
//! - [`io`]: CSV and config file formats.

pub mod config;
pub mod dgp;
pub mod dimtest;
pub mod error;
pub mod estimands;
pub mod firststep;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod model;
pub mod normal;
pub mod secondstep;
pub mod seed;

pub use dgp::{simulate_dataset, ActualTransform, DgpConfig, LatentTruth, Rounding};
pub use error::{Error, Result};
pub use estimands::EstimandReport;
pub use firststep::{estimate_individual_moments, kmeans_partition, select_k, Grouping, IndividualMoments};
pub use harness::{run_replication, run_study, EstimationSettings, ReplicationResult, StudySummary};
pub use model::{ActualRecord, LinkFunction, PseudoPanel, StatedRecord};
pub use secondstep::{fit_grouped_probit, GroupedProbitFit, ModelSpec};
