//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! This crate is the numeric floor of the DuETT workspace. Everything the
//! model does is expressed as primitive operations recorded on a [`Graph`];
//! [`Graph::grad`] then walks the tape backwards once to produce gradients.
//!
//! Values are generic over [`Real`], implemented for `f32` (the default
//! training precision) and `f64` (used by gradient checks). Parameters live in
//! a [`ParamStore`] and are only mutated by the optimizer between steps.

pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod real;
pub mod rng;
mod schedule;
mod tensor;

pub use graph::{BatchNormStats, Graph, Var};
pub use optim::{adamw_step, AdamW, OptState};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use real::{Precision, Real};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction, graph evaluation and optimization.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("gradient path crosses non-differentiable op {0}")]
    NonDifferentiable(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
