//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] records operations eagerly (values are computed as nodes are
//! created) and [`Graph::backward`] walks the tape in reverse. Leaves created
//! with [`Graph::param`] accumulate gradients; [`Graph::input`] leaves do not.
//! [`gradcheck`] compares those gradients against central finite differences.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod scalar;
mod tensor;

pub use gradcheck::{
    gradcheck, primitive_case, GradcheckConfig, GradcheckModel, GradcheckReport, ParamReport, PrimitiveCase,
};
pub use graph::{op_set, CustomOp, Graph, Mode, Var};
pub use kernels::{huber_elem, huber_grad, softmax_last, softmax_last_backward};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
}
