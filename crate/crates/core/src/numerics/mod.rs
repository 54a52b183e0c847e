//! Dense tensors, reverse-mode differentiation, the optimizer and the
//! finite-difference checker.

pub mod counter;
mod gradcheck;
pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    causal_conv1d, cross_entropy, elementwise, matmul, mean_pool_tokens, softmax, Activation,
    IGNORE_TARGET,
};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamW, Moments};
pub use tape::{Gradients, Graph, Var};
pub use tensor::Tensor;
