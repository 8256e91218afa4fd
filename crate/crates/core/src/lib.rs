//! Sieve-targeted estimation of conditional survival-probability contrasts
//! from left-truncated, right-censored data.

pub mod cate;
pub mod data;
pub mod error;
pub mod eval;
pub mod nuisance;
pub mod rng;
pub mod sieve;
pub mod simulation;
pub mod solver;
pub mod targeting;

pub use error::{Error, Result};
