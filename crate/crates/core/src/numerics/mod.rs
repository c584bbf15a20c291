//! Dense tensors, a reverse-mode tape, finite-difference checking and Adam.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, NodeId};
pub use params::{ParamId, ParamSet, Parameter};
pub use tensor::{matmul, softmax, Tensor};
