//! Sparse autoencoder (SAE) training and cross-dictionary analysis.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root pin the common concrete types.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autointerp;
pub mod data;
pub mod error;
pub mod evalsuite;
pub mod io;
pub mod metasae;
pub mod metrics;
pub mod rng;
pub mod sae;
pub mod scalar;
pub mod stitching;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use scalar::{Dtype, Scalar};

pub type Sae32 = sae::Sae<f32>;
pub type Sae64 = sae::Sae<f64>;
pub type Batch32 = data::ActivationBatch<f32>;
pub type Batch64 = data::ActivationBatch<f64>;
pub type MetaSae32 = metasae::MetaSae<f32>;
pub type MetaSae64 = metasae::MetaSae<f64>;
