//! Post-training sparsity engine.
//!
//! The pipeline has two steps. [`allocation`] turns a global sparsity target
//! into per-layer rates and magnitude masks; [`reconstruction`] then
//! optionally corrects the weight distribution shift and optimizes each
//! reconstruction unit of the sparse model to reproduce the dense model's
//! unit outputs on a small calibration set. [`metrics`] aggregates oriented
//! task scores into the overall metrics used to compare configurations.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the double-precision instantiation used throughout the harness.

pub mod allocation;
pub mod autodiff;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod reconstruction;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = autodiff::Tape<f64>;
pub type ModelGraph = graph::ModelGraph<f64>;
pub type ModelGraph32 = graph::ModelGraph<f32>;
pub type LayerNode = graph::LayerNode<f64>;
pub type Layer = graph::Layer<f64>;
pub type CalibrationSet = reconstruction::CalibrationSet<f64>;
