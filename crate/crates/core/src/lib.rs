//! Double Bayesian predictive stacking for multivariate spatial regression.
//!
//! Conjugate matrix-normal / inverse-Wishart posteriors are fit on random
//! data subsets for every candidate (α, φ) model, combined within each
//! subset by stacking their cross-validated predictive densities, and then
//! combined across subsets by a second stacking stage.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod artifact;
pub mod conjugate_regression;
pub mod dbps;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod matrix_variate;
pub mod seed;
pub mod spatial_kernel;
pub mod stacking;
pub mod synthetic;

pub use conjugate_regression::{
    latent_posterior, marginal_posterior, posterior_samples, predictive_params, sequential_update, Dataset,
    LatentPosterior, MniwPosterior, PredictiveMatrixT, PriorSpec, ThetaDraw,
};
pub use dbps::{
    fit_dbps, predict, sample_theta, DbpsConfig, PredictionResult, StackedModel, SubsetResult, WeightMethod,
};
pub use diagnostics::{EmpiricalVariogram, KlBound, VariogramFit};
pub use error::{Error, Result};
pub use linalg::Cholesky;
pub use matrix_variate::{InverseWishartParams, MatrixNormalParams, MatrixTParams};
pub use spatial_kernel::{KernelSpec, LocationSet, ModelGrid, ModelSpec};
pub use stacking::{LogPredDensityTable, SimplexWeights, SolverOptions};
pub use synthetic::{generate, GeneratorSpec, SyntheticData};
