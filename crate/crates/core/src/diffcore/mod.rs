//! Dense tensors, a define-by-run reverse-mode tape, and Adam.
//!
//! Every op records a node on the [`Tape`]; nodes whose inputs do not require
//! grad are kept for their values only and are skipped by `backward`.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{Adam, AdamParam};
pub use gradcheck::grad_check;
pub use tape::{CustomVjp, Tape, Var};
pub use tensor::{Element, Tensor};


#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{0}")]
    InvalidArgument(String),
}
