//! Counterfactual trajectory prediction under dynamic treatment strategies.
//!
//! The crate is organised around five pieces:
//!
//! - [`sim`]: a stochastic lumped hemodynamic simulator that produces an
//!   observational cohort and seed-coupled counterfactual cohorts.
//! - [`gnet`]: sequential conditional-expectation models over ordered
//!   covariate groups, trained with teacher forcing.
//! - [`gcomp`]: Monte-Carlo g-computation on top of any [`gcomp::SequenceModel`].
//! - [`eval`]: MSE, calibration, population averages and treatment effects.
//! - [`experiment`]: end-to-end orchestration with a hashed manifest.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gcomp;
pub mod gnet;
pub mod io;
pub mod quantile;
pub mod rng;
pub mod schema;
pub mod sim;

pub use dataset::{Dataset, DatasetHeader, Regime, Trajectory};
pub use error::{Error, Result};
pub use schema::{Action, ChannelKind, ChannelSchema, ChannelSpec};
