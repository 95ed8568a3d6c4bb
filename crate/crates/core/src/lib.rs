//! Entropic optimal transport, relaxed entropic transport and maximum-likelihood
//! deconvolution for finitely supported measures.

pub mod cli;
pub mod costs;
pub mod deconvolution;
pub mod entropic_ot;
pub mod error;
pub mod measures;
mod newton;
pub mod relaxed_ot;
pub mod rng;
pub mod verification;

pub use error::{Error, Result};
