//! Dual-sequence language model at desk scale.
//!
//! Two inter-attending autoregressive decoders (vocal, accompaniment) plus a
//! non-autoregressive song decoder, driven by a configurable attention-mask
//! strategy engine, trained on a synthetic paired-track token corpus.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]: f32 or f64);
//! 64-bit is the default for training, tests and gradient checks, 32-bit is
//! an opt-in for speed. Concrete aliases for both live at the crate root.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod kernels;
pub mod graph;
pub mod gradcheck;
pub mod vocab;
pub mod task;
pub mod mask;
pub mod config;
pub mod params;
pub mod corpus;
pub mod assemble;

pub use error::{CoreError, CoreResult};
pub use scalar::Scalar;

/// Default-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Reduced-precision tensor for faster training.
pub type Tensor32 = tensor::Tensor<f32>;
/// Default-precision autodiff graph.
pub type Graph64 = graph::Graph<f64>;
/// Reduced-precision autodiff graph.
pub type Graph32 = graph::Graph<f32>;
