//! Debiased machine learning for conditional moment restrictions.
//!
//! The crate estimates a structural function `f` satisfying
//! `E[Y - f(X) | C] = 0` with a Neyman-orthogonal two-stage procedure:
//! nuisances `s(c) = E[Y | c]` and the conditional law of `X` given `C`
//! are cross-fitted on fold complements, and the structural parameters are
//! chosen to minimise `(s(c) - E[f(X) | c])^2` on the held-out folds.
//!
//! Modules:
//!
//! - [`data`]: seeded generators, CSV ingestion, fold plans, standardisation.
//! - [`estimators`]: regressors and conditional density estimators.
//! - [`score`]: orthogonal and naive scores plus a Gateaux-derivative checker.
//! - [`dml`]: the cross-fitted estimator, its single-fit variant and the naive baseline.
//! - [`eval`]: truth oracles, benchmarks, rate studies and ill-posedness.

pub mod data;
pub mod dml;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod io;
pub mod rng;
pub mod score;

pub use error::{Error, Result};
