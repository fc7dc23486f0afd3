//! Variational spike-and-slab Gaussian process latent variable models (SSGP-LVM)
//! and their multi-view extension (spike-and-slab MRD).

pub mod bound;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod optimize;
pub mod psi;
pub mod variational;

pub use error::{Error, Result};
