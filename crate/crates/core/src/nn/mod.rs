//! Dense and LSTM networks with exact backpropagation.
//!
//! Everything here is a pure function of its inputs and runs in `f64`.
//! Networks are described by an [`Architecture`]: an optional LSTM cell
//! (consuming the whole input sequence and emitting its final hidden
//! state), any number of dense layers, and a softmax output trained with
//! cross-entropy.

mod arch;
mod model;
mod tensor;

pub use arch::{Activation, Architecture, LayerSpec};
pub use model::{
    backward, finite_diff_gradient, forward, loss, loss_and_gradient, Batch, ClassProbs,
    ForwardCache,
};
pub use tensor::{checked_numel, Gradient, Tensor, WeightSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("forward cache does not match these weights or labels")]
    StaleCache,
}
