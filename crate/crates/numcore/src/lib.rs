//! Small dense-tensor engine: `f64` tensors, a reverse-mode autodiff tape,
//! Adam, and the `HXT1` on-disk tensor format.
//!
//! Everything is deterministic given a seed. With the `parallel` feature the
//! large matrix products split rows over rayon without changing the order
//! in which any single output is accumulated.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use optim::{adam_step, AdamConfig, LrSchedule, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
