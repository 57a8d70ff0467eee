//! Multi-target tracking with Poisson multi-Bernoulli mixture (PMBM) densities.
//!
//! The crate implements the PMBM filter together with a clustered variant that
//! partitions tracks into independent clusters from the measurement gates,
//! updates each cluster on its own, and keeps the posterior compact through
//! Bernoulli merging and inter-track swapping. A small-cardinality exact
//! multi-object density evaluator is included so every approximation can be
//! checked against the density it is supposed to preserve.
//!
//! Module map:
//! - [`rfs`]: core random-finite-set types and the exact set-density oracle
//! - [`lingauss`]: linear-Gaussian models and Kalman primitives
//! - [`gating`]: ellipsoidal, k-d tree and R-tree gating
//! - [`clustering`]: measurement-driven clustering and re-clustering
//! - [`assignment`]: ranked k-best assignments (Murty over a JV solver)
//! - [`filter`]: the PMBM recursion (predict, per-cluster update, step)
//! - [`reduction`]: Bernoulli KLD, intra-track merging, inter-track swapping
//! - [`eval`]: state extraction and the GOSPA metric
//! - [`scenario`]: simulated ground-truth and measurement generation

pub mod assignment;
pub mod clustering;
pub mod error;
pub mod eval;
pub mod filter;
pub mod gating;
pub mod lingauss;
pub mod reduction;
pub mod rfs;
pub mod scenario;

pub use error::PmbmError;
