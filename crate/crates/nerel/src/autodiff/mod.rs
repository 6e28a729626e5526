//! Minimal reverse-mode automatic differentiation on an append-order tape.
//!
//! Every value is a flat `Vec<f64>` with a shape; operations are recorded on
//! a [`Graph`] in the order they execute, and [`Graph::backward`] replays the
//! tape in exact reverse order. Dynamic topologies (stack pushes and pops
//! differ per document) fall out for free because each document builds its
//! own graph.
//!
//! Persistent, trainable parameters live in a [`ParamStore`] outside any
//! graph and are leased into a graph on first use; after a backward pass the
//! accumulated gradients are scattered back so the optimizer can consume
//! them.

mod adam;
mod graph;
mod lstm;
mod params;

pub use adam::{adam_update, clip_global_norm, Adam, AdamState};
pub use graph::{Graph, NodeId, Tensor};
pub use lstm::{bilstm_run, LstmCell};
pub use params::{ParamId, ParamStore};

use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a non-empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: expected rank-{expected} operand, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("cross_entropy: gold index {gold} out of range for distribution of length {len}")]
    GoldIndexOutOfRange { gold: usize, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("dropout: ratio {0} outside [0, 1)")]
    InvalidDropoutRatio(f64),
    #[error("backward: loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Numerically stable logistic function.
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
