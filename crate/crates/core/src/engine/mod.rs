//! Dense tensors, reverse-mode differentiation, optimizers and checkpoints.

pub mod checkpoint;
mod error;
pub mod kernels;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{EngineError, Result};
pub use optim::{adam_step, ema_update, AdamConfig, AdamState};
pub use param::{Param, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::{argmax_channels, BoolMask, IntMask, Tensor};
