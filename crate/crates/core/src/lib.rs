//! Surrogate explanations of gradient-boosted tree ensembles wrapped in
//! inductive conformal intervals.

pub mod blackbox;
pub mod cli;
pub mod conformal;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod matrix;
pub mod pipeline;
pub mod seed;
pub mod surrogate;

pub use error::{Error, Result};
pub use matrix::Matrix;
