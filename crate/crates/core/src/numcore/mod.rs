//! Dense double-precision compute: tensors, fully connected layers with
//! hand-written backpropagation, and the loss primitives used by the
//! distillation and contrastive objectives.

mod layers;
mod ops;
mod tensor;

pub use layers::{
    backward, backward_with_taps, forward, parameters, parameters_mut, sgd_step, Activation,
    DenseLayer, ForwardCache, GradientTape,
};
pub use ops::{
    argmax, cosine_similarity, cosine_similarity_grad, cross_entropy, kl_divergence,
    kl_from_logits, log_softmax, softmax, LOG_EPS,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("forward cache does not belong to these layers")]
    StaleCache,
    #[error("gradient tape is not aligned with the parameter list")]
    MisalignedTape,
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[cfg(test)]
mod tests;
