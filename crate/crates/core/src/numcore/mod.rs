//! Dense `f64` matrices with a reverse-mode tape.
//!
//! A [`Graph`] owns every value produced during one forward computation.
//! Operations on [`Var`] handles append nodes in creation order, so the node
//! list is already a topological order and [`Graph::backward`] is a single
//! reverse sweep.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{central_difference, grad_check, GradCheckReport};
pub use graph::{Graph, Var, BLACKOUT_THRESHOLD, SOFTMAX_EPS};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    BadData { shape: [usize; 2], len: usize },
    #[error("ragged rows: expected width {expected}, found {found}")]
    Ragged { expected: usize, found: usize },
    #[error("{op}: value {value} outside the domain at index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar([usize; 2]),
    #[error("function value is not finite when perturbing coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("{0}")]
    Invalid(String),
}
