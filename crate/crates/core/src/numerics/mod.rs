//! Dense tensors, reverse-mode autodiff, AdamW and the learning-rate schedule.

mod graph;
mod optim;
mod store;
mod tensor;

pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, StepStats, WarmupCosine};
pub use store::{Param, ParameterStore};
pub use tensor::{cosine, DType, Real, Tensor};

#[cfg(test)]
mod tests;
