//! Scalable Bayesian spatio-temporal disease mapping on areal count data.

pub mod aggregation;
pub mod cholesky;
pub mod criteria;
pub mod descriptives;
pub mod error;
pub mod graph;
pub mod imputation;
pub mod io;
pub mod inference;
pub mod models;
pub mod partition;
pub mod pipeline;
pub mod simulator;
pub mod sparse;
pub mod structures;

pub use error::{Error, Result};
