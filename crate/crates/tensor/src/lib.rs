//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: [`Graph`] records every operation during the
//! forward pass and replays the tape in reverse to accumulate gradients.
//! [`Graph::detach`] severs a value from its producers, which is the primitive
//! the trajectory decoder relies on to stop gradients between its stages.
//!
//! Values are rank-N row-major arrays over either `f32` or `f64` (the [`Real`]
//! trait). 64-bit is the precision used by the oracle tests; 32-bit is
//! available for latency measurements.

mod graph;
mod tensor;

pub use graph::{Graph, TensorId, BCE_CLAMP, LAYER_NORM_EPS};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};

/// Scalar element type of a tensor: `f32` or `f64`.
pub trait Real:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Error type for tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of bounds for rank {rank}")]
    AxisOutOfBounds {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("backward: loss is detached from the computation graph")]
    LossDetached,
}

pub type Result<V> = std::result::Result<V, TensorError>;
