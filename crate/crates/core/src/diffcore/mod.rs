//! Dense `f64` arrays with a recording tape for reverse-mode differentiation.
//!
//! Only the operations the path-memory model needs are provided. A [`Tape`]
//! records values in execution order, so a single reverse sweep visits every
//! node after all of its consumers.

mod array;
mod tape;

pub use array::DenseArray;
pub use tape::{
    ActivationKind, ElementwiseKind, Gradients, ReduceKind, Tape, Var, ROTATE_EPS, STD_GRAD_EPS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl DiffError {
    pub(crate) fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DiffError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
