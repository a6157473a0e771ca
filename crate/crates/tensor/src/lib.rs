//! Minimal reverse-mode automatic differentiation for convolutional image networks.
//!
//! Tensors are dense and row-major; images use the `(batch, channel, height,
//! width)` layout. A [`Graph`] records operations eagerly and differentiates
//! them with one reverse sweep. The same code runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

mod conv;
mod error;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{pixel_shuffle, pixel_unshuffle, BatchStats, Graph, Var};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
