//! Dense `f64` matrices and reverse-mode differentiation over a fixed
//! operator set.

mod gradcheck;
mod graph;
mod matrix;

use thiserror::Error;

pub use gradcheck::{
    compare_with_finite_differences, gradcheck, relative_error, GradcheckReport, ParamCheck,
    RELATIVE_FLOOR,
};
pub use graph::{Gradients, Graph, NodeId, Op, OpKind, LAYERNORM_EPS};
pub use matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("numeric error: non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("{0}: no valid rows")]
    Empty(&'static str),
    #[error("{0}: zero-norm row cannot be normalized")]
    Degenerate(&'static str),
}
