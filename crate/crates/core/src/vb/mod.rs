//! Variational Bayes inference.
//!
//! A sweep runs, in order: factor variances and damped Newton moves per
//! entity set (one factor column at a time), biases, ARD precisions, and
//! finally noise precisions (Gaussian relations) or pseudo-data
//! (non-Gaussian relations). Sweeps repeat until the relative ELBO change
//! drops below the tolerance.

pub mod data;
pub mod elbo;
pub mod engine;
pub mod likelihood;
pub mod updates;

pub use data::{PseudoBlock, PseudoData, RelationIndex, Residuals, TrainingData};
pub use elbo::{elbo, elbo_terms, ElboTerms};
pub use engine::{fit, fit_from, FitOutput, TraceRecord, DIVERGENCE_TOLERANCE};
pub use likelihood::{sigmoid, softplus, LikelihoodSpec};
pub use updates::{
    closed_form_target, expected_sq_residual, factor_gradient, factor_variance, newton_step, update_ard,
    update_bias, update_pseudodata, update_tau,
};
