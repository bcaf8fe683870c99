//! Benchmark harness around the `postprune` engine: synthetic datasets, a
//! small fixture zoo, allocation and reconstruction sweeps, and report
//! rendering for the allocation, reconstruction, architecture, robustness
//! and task tracks.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod fixtures;
pub mod report;
pub mod sweep;
pub mod train;

pub use error::{HarnessError, Result};
