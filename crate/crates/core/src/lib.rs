//! Clustering players by shooting habit with a zero-inflated Poisson
//! regression whose coefficients and extra-zero probabilities follow a
//! mixture-of-finite-mixtures prior.
//!
//! The pipeline runs from raw shot locations ([`court`]) through spatial
//! covariates ([`basis`]) and MCMC ([`sampler`]) to posterior summaries
//! ([`posterior`]). [`simgen`] and [`baselines`] support simulation studies.

pub mod baselines;
pub mod basis;
pub mod court;
pub mod error;
pub mod mfm;
pub mod posterior;
pub mod sampler;
pub mod simgen;
pub mod zip;

pub use error::{Error, Result};
