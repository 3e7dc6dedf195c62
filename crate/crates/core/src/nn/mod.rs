//! Minimal deterministic neural-network toolkit: dense `f64` tensors, a
//! reverse-mode autodiff tape, parameter management, Adam, and a forward
//! abstraction shared between training and inference.

pub mod adam;
pub mod forward;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use forward::{Ctx, EvalCtx, TapeCtx};
pub use params::{Builder, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
