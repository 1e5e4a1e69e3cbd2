//! Adaptive gradient methods as instances of one generic AGD template.
//!
//! The crate is split along the lines of the experiment pipeline:
//!
//! - [`problems`]: smooth test objectives with exact constants `L`, `G`, `f*`.
//! - [`oracle`]: stochastic first-order oracles (bounded, truncated, sub-Gaussian, minibatch).
//! - [`schedules`]: the AdaGrad accumulator, averaging weights and the `Γ_t` recursion.
//! - [`optimizers`]: the three-sequence template and its presets, producing [`optimizers::RunTrace`]s.
//! - [`analysis`]: concentration Monte-Carlo checks, theoretical bounds, rate fits, quantiles.
//! - [`harness`]: experiment configuration, orchestration and persistence behind the `agd` CLI.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod optimizers;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod schedules;

pub use error::{Error, Result};
