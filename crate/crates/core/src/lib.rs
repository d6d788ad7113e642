//! Sparse variational Gaussian processes on the hypersphere.
//!
//! Zonal kernels are described by their eigenvalue spectrum over spherical
//! harmonics, either computed from a shape function by Funk–Hecke
//! quadrature or given parametrically as a continuous-depth power law
//! `λ_ℓ = ℓ^{-β}`. Posterior inference uses inter-domain inducing variables
//! built from (optionally phase-truncated) harmonic feature bases, which
//! makes the prior covariance of the inducing variables diagonal.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_io;
pub mod error;
pub mod harmonics;
pub mod kernels;
pub mod special_math;
pub mod vargp;

pub use error::{Error, Result};
