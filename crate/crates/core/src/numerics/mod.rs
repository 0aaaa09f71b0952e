//! Dense `f64` arrays, a reverse-mode tape, AdamW, and a finite-difference checker.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;

pub use array::Array;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, Node, Var, DEBUG_NAN_ENV};
pub use optim::{AdamW, AdamWConfig};
pub use params::{
    LayerNorm, Linear, NamedParam, ParamBuilder, ParamId, ParamStore, Pass, LAYER_NORM_EPS,
};
pub use rng::{stream_rng, StreamRng};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for axis of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{op} produced a non-finite value from finite inputs")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; build a fresh forward pass")]
    GraphConsumed,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("objective returned a non-finite value")]
    NonFiniteObjective,
}
