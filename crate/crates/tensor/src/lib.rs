//! Minimal dense tensor library with tape-based reverse-mode autodiff.
//!
//! Everything the captioning model needs and nothing more: 2-D matmul,
//! elementwise ops, GeLU, layer norm, softmax, fused multi-head attention,
//! embedding gathers, dropout, and fused losses. Generic over `f32` / `f64`.

mod attention;
mod ops;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use attention::AttentionGeometry;
pub use optim::{adam_step, lr_schedule, AdamConfig, Moments, OptimizerState};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
