//! Distributionally robust optimization with parametric generative adversaries.
//!
//! The crate implements a two-player differentiable game: a small linear
//! classifier minimizes an importance-weighted loss while a generative
//! adversary (isotropic Gaussian or label-conditioned bigram) reweights the
//! training distribution toward the model's failure modes, subject to a KL
//! budget around its maximum-likelihood fit. Baselines (ERM, non-parametric
//! KL-DRO, exponentiated-gradient Group-DRO), checkpoint/hyper-parameter
//! selection, synthetic benchmark generators and a grid-search harness are
//! included.
//!
//! The crate is `no_std` (with `alloc`); all transcendental math goes through
//! [`libm`] so results are bit-identical across platforms. File formats and
//! the command line live in the companion `pdro-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adversaries;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod math;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod selection;
pub mod trainer;

pub use error::Error;
pub use rng::Rng;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
