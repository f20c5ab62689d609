//! Constrained empirical-Bayes denoising via optimal transport.
//!
//! Given noisy observations from a known likelihood family, this crate fits
//! a nonparametric prior (NPMLE), computes the Bayes denoiser, and
//! post-processes it into denoisers whose outputs provably match prescribed
//! functionals of the latent distribution:
//!
//! - [`constrain::variance_constrained`] matches the latent mean and
//!   covariance through a Bures-Wasserstein transport map (an affine map of
//!   the Bayes values);
//! - [`constrain::distribution_constrained`] matches the latent distribution
//!   itself through an exact optimal-transport coupling;
//! - [`constrain::general_constrained`] matches expectations of arbitrary
//!   functions (moments, support penalties) through a moment-constrained
//!   coupling linear program;
//! - heterogeneous variants handle per-observation noise covariances and
//!   Poisson exposures, including the per-group conditional variance
//!   constraint.
//!
//! The `otdenoise` binary exposes `fit`, `denoise`, `simulate`, and
//! `evaluate` subcommands over CSV/JSON files; see the README.

pub mod bures;
pub mod cli;
pub mod constrain;
pub mod gmodel;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod sim;
pub mod transport;
