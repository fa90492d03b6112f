//! Bayesian stacking of regression candidates.
//!
//! Candidates are Bayesian linear regressions (closed-form posterior means) or
//! logistic regressions (MAP estimates). Their out-of-sample predictions are
//! combined with weights on the unit simplex chosen to minimize the
//! cross-validated squared error.
//!
//! Module map:
//! - [`dgp`]: datasets, CSV input, synthetic designs
//! - [`candidates`]: priors, posterior means, MAP fits
//! - [`loo`]: leave-one-out and k-fold prediction matrices
//! - [`weights`]: the simplex-constrained QP
//! - [`stacking`]: model assembly, prediction, evaluation ratios
//! - [`spectral`]: eigenvalue checks for hat matrices
//! - [`harness`]: Monte Carlo experiments, CSV output
//! - [`plot`]: SVG ratio curves

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod candidates;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod loo;
mod optim;
pub mod plot;
pub mod spectral;
pub mod stacking;
pub mod weights;

pub use candidates::{CandidateSpec, FitResult, Prior, TScale};
pub use dgp::{Dataset, DgpConfig, Family};
pub use error::{Result, StackError};
pub use loo::{CvPredictionMatrix, CvScheme, ResidualMatrix};
pub use stacking::StackModel;
pub use weights::{GramMatrix, WeightVector};
