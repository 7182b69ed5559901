//! Bayesian neural networks with regularized horseshoe priors on unit weight
//! vectors, fitted by structured black-box variational inference and pruned
//! by thresholding the posterior of each unit's scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`scalar_dist`]: log-normal, inverse-gamma and gamma laws with the
//!   closed-form expectations the objective needs.
//! - [`lowrank`]: diagonal-plus-rank-one covariances and the matrix-normal
//!   built on them.
//! - [`model`]: the generative model and its log joint density.
//! - [`variational`]: the four variational families and the ELBO.
//! - [`tape`] and [`gradient`]: reverse-mode gradients of the ELBO.
//! - [`trainer`]: Adam plus closed-form auxiliary updates.
//! - [`pruning`]: the unit-dropping rule and fine-tuning.
//! - [`eval`], [`experiment`]: metrics, prior samples and complete runs.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradient;
pub mod lowrank;
pub mod model;
pub mod prior_samples;
pub mod pruning;
pub mod rng;
pub mod scalar_dist;
pub mod tape;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/variational.md")]
    mod variational {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
