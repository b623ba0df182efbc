//! Entropic autoencoder training framework.
//!
//! The encoder of an autoencoder is treated as a statistical-mechanical
//! system in contact with a heat bath: encoder parameters are sampled from
//! the Gibbs measure induced by the reconstruction loss at a fixed
//! temperature, while the decoder descends the gradient of the resulting
//! free energy, estimated as an average over the sampled encoder ensemble.
//! The crate provides the thermostatted sampler, multilayer-perceptron
//! forward/reverse/forward-mode differentiation, the two-loop trainer plus
//! variational and vanilla baselines, latent-dynamics coefficient recovery,
//! posterior-collapse diagnostics, quadrature verification of the
//! free-energy identities, and dataset generators/loaders.

// The numeric kernels (triangular solves, Householder reflections, banded
// stencils) are written as index loops on purpose: the indices mirror the
// mathematical notation.
#![allow(clippy::needless_range_loop)]

pub mod datasets;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub(crate) mod io;
pub mod networks;
pub mod sampler;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::EaeError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, EaeError>;
