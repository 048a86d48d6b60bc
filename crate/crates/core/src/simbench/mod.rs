//! Synthetic scenarios, the benchmark runner, the bias study and the
//! effect-reporting helpers.

mod bench;
mod functions;
mod report;
mod scenarios;

pub use bench::*;
pub use functions::{biased_propensity, draw_features, eval_f, MIN_P};
pub use report::*;
pub use scenarios::*;
