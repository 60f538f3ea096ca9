//! Dense `f64` tensors with a recording tape for reverse-mode automatic
//! differentiation, a handful of neural-network layers, an Adam optimizer
//! and a small binary checkpoint format.
//!
//! Values flow through a [`Tape`]: every operation appends a node holding its
//! output [`Tensor`] and enough saved state to replay the chain rule.
//! Trainable weights live in a [`ParamStore`] and are bound onto a fresh tape
//! for each forward pass.

mod error;
mod gemm;
mod ops;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod nn;
pub mod optim;
pub mod param;

pub use error::{Result, TensorError};
pub use param::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
