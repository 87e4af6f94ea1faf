//! Feature selection representation matching (FSRM) for estimating individual
//! and average treatment effects from observational data.
//!
//! A network with a one-to-one feature-selection layer learns a sparse,
//! balanced representation of the covariates while predicting treatment and
//! factual outcomes; counterfactuals are then imputed by optimal matching in
//! that representation.

pub mod balance;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod harness;
pub mod matching;
pub mod network;
pub mod numcore;

pub use error::{FsrmError, Result};
