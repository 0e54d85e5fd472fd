//! Minimal reverse-mode automatic differentiation for the convolutional
//! networks in this workspace: reflection-padded convolutions, instance and
//! layer normalization, nearest upsampling, average pooling, and the
//! elementwise/reduction ops the training objectives need.
//!
//! Generic over [`Float`] so the same network code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod error;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Backward, Graph, NormAxes, Var};
pub use params::{Amsgrad, AmsgradConfig, Entry, EntryKind, Gradients, Moments, ParamId, ParamKey, ParamStore};
pub use tensor::{Float, Tensor};
