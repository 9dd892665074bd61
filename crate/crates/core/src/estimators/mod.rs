//! Nuisance estimators: scalar regressors for the outcome mean given the
//! conditioning variables, and conditional densities of the endogenous input.

mod basis;
mod density;
mod gbt;
mod linalg;
mod mlp;
mod regressor;

pub use basis::{Basis1d, BasisMap, Factor};
pub use density::{
    fit_conditional_density, mixture_expectation, BinnedParams, ConditionalDensity, ConditionalLaw,
    DensitySpec, DrawScheme, GaussianMixtureParams, MixtureNetParams, SIGMA_MIN,
};
pub use gbt::{GbtParams, GradientBoostedTrees};
pub use linalg::ridge_solve;
pub use mlp::{Activation, AdamW, Mlp, Workspace};
pub use regressor::{fit_regressor, NetParams, Regressor, RegressorSpec, MODEL_FORMAT_VERSION};
