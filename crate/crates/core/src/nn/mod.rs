//! Conditional noise estimator, reverse-mode gradients and optimizers.

pub mod checkpoint;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use optim::{AdamState, EmaState};
pub use tape::{Gradients, NodeId, Op, Tape};
pub use tensor::Tensor;
pub use unet::{Arch, DenoiserParams};
