//! Estimators for heterogeneous treatment effects from randomized and
//! observational data, plus the simulation benchmark used to compare them.
//!
//! Fitted models implement [`data::EffectModel`]. [`estimators::Method`]
//! parses method tags and [`estimators::FittedModel`] holds any fitted model.

pub mod baselines;
pub mod boosting;
pub mod causal_tree;
pub mod data;
pub mod error;
pub mod estimators;
pub mod forests;
pub mod io;
pub mod mars;
pub mod persist;
pub mod propensity;
pub mod pto;
pub mod rng;
pub mod simbench;
