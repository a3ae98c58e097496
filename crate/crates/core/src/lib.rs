//! Structural preference estimation for forced-choice conjoint experiments.
//!
//! Respondent covariates `Z` are mapped to a vector of marginal utilities
//! `β(Z)` by a small ReLU network whose output feeds a logit model on the
//! profile-pair difference `ΔX`. Out-of-fold predictions from a respondent-level
//! K-fold split are combined with an influence-function correction to give
//! debiased, respondent-clustered inference on `θ = E[β(Z)]`, and the fitted
//! preference matrix drives a catalog of structural quantities (marginal
//! effects, polarization, importance shares, substitution rates, counterfactual
//! choice probabilities).
//!
//! The pipeline, bottom to top:
//!
//! - [`dataio`]: schema, dummy coding, differencing, covariate standardization.
//! - [`net`]: the feature network, its logit head, loss, gradients and training.
//! - [`crossfit`]: respondent-level folds and the out-of-fold [`PreferenceMatrix`].
//! - [`dml`]: local information matrices, influence values, clustered variance.
//! - [`baseline`]: homogeneous Newton logit and subgroup validation.
//! - [`quantities`]: functionals of the preference matrix.
//! - [`simulate`]: synthetic data, benchmark Monte Carlo and factorial grids.
//!
//! Data-parallel loops go through [`Exec`]; with the `parallel` feature
//! disabled every loop runs sequentially. Reductions use a fixed chunking, so
//! both modes produce bitwise-identical numbers.

pub mod baseline;
pub mod crossfit;
pub mod dataio;
pub mod dml;
mod error;
pub mod exec;
pub mod link;
pub mod net;
pub mod quantities;
pub mod rng;
pub mod simulate;
mod stats;

pub use crossfit::{FoldPlan, PreferenceMatrix};
pub use dataio::{AttributeSchema, ConjointDataset};
pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
pub use net::{Network, NetworkConfig};

/// Library version recorded in run manifests and network files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
