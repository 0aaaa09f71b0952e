//! Temporal-aligned transformer for multi-horizon peak demand forecasting.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense arrays, reverse-mode tape, AdamW, gradient checking.
//! * [`data`]: sample schema, synthetic peak-demand generator, file IO, splits.
//! * [`embedding`], [`attention`], [`model`]: the network.
//! * [`training`]: joint P50/P90 quantile loss, optimization loop, checkpoints.
//! * [`evaluation`]: overall and target-date accuracy, ablation harness, reports.

pub mod attention;
pub mod data;
pub mod embedding;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;

pub use numerics::{Array, Graph, Var};
