//! Minimal differentiable-array core: dense `f32` tensors, a recorded
//! computation graph with reverse-mode gradients, and Adam with global-norm
//! gradient clipping.

mod adam;
mod graph;
mod tensor;

pub use adam::{
    adam_step, AdamConfig, OptimizerState, StepStats, DEFAULT_CLIP_NORM, DEFAULT_LEARNING_RATE,
};
pub use graph::{causal_mask, log_softmax_into, Gradients, Graph, Var};
pub use tensor::Tensor;
