//! Benchmark harness for in-context linear regression with interchangeable
//! attention mechanisms.
//!
//! The crate provides, from the bottom up: deterministic RNG streams, a
//! tape-based reverse-mode autodiff engine over dense tensors, causal
//! attention kernels (quadratic softmax attention and kernelized linear
//! attention with pluggable feature maps), synthetic regression task
//! generation with an ordinary-least-squares oracle, a decoder-only
//! transformer assembled from those pieces, an Adam training loop, and the
//! evaluation metrics and reports the experiments are scored with.
//!
//! The numeric core is generic over the scalar type ([`Float`]): `f32` is
//! the training default, `f64` backs gradient checks and oracles. Concrete
//! aliases [`Tensor32`] and [`Tensor64`] name the two instantiations.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod datagen;
pub mod eval;
pub mod model;
pub mod training;
pub mod error;
pub mod rng;
pub mod tensor;

mod float;

pub use error::{Error, Result};
pub use float::Float;
pub use rng::RngStream;
pub use tensor::Tensor;

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;

/// Double-precision tensor, used by gradient checks and oracles.
pub type Tensor64 = Tensor<f64>;
