//! Wasserstein-ball adversarial perturbations for images.
//!
//! The crate is organized around a constrained, entropy-regularized Sinkhorn
//! projection ([`sinkhorn::project`]) that maps a perturbed pixel distribution
//! back into the intersection of a Wasserstein ball, the ℓ1-preservation
//! constraint and the valid pixel range. Around it sit:
//!
//! - [`imagecore`]: images, normalization, cost matrices, distances and
//!   ball-membership audits;
//! - [`oracle`]: brute-force solvers for tiny instances, used as ground truth;
//! - [`attack`]: PGD for ℓ∞, ℓ2 and Wasserstein threat models;
//! - [`model`]: small differentiable classifiers with exact input gradients
//!   and (adversarial) training;
//! - [`perturb`]: translation, rotation and blur plus their measurement tables;
//! - [`dataio`]: IDX loading, a synthetic dataset and report documents.
//!
//! Batch work (attacks over a dataset, distance tables, per-example gradients)
//! goes through [`par::Exec`], which uses rayon when the `parallel` feature is
//! enabled and falls back to plain iteration otherwise.

pub mod attack;
pub mod dataio;
mod error;
mod numeric;
pub mod imagecore;
pub mod model;
pub mod oracle;
pub mod par;
pub mod perturb;
pub mod sinkhorn;

pub use error::{Error, Result};
