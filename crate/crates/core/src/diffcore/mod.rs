//! Dense-tensor reverse-mode differentiation, layers, and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use layers::{Binder, Conv2d, LayerNorm, Linear, Mlp, Module, Optimizer, Track};
pub use tape::{Gradients, GrlConfig, Tape, Var};
pub use tensor::Tensor;
