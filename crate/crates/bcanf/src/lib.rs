//! Conditional augmented-normalizing-flow B-frame video codec.
//!
//! The crate is organized around a small deterministic tensor engine with
//! reverse-mode gradients (`tensor`, `nn`), a two-step conditional flow codec
//! (`canf`), probability models plus a bit-exact range coder (`entropy`),
//! motion estimation/prediction/warping (`motion`), frame synthesis
//! (`synthesis`), hierarchical-B GOP planning (`gop`), the per-frame coding
//! pipelines and bitstream container (`codec`), a training harness
//! (`training`), and rate-distortion metrics plus video I/O (`metrics`,
//! `video`).
//!
//! Core math is generic over the scalar type ([`scalar::Scalar`], implemented
//! for `f32` and `f64`). Coding and training run in `f32`; gradient-check
//! suites run the same code in `f64`.

pub mod canf;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod gop;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod scalar;
pub mod synthesis;
pub mod tensor;
pub mod training;
pub mod video;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used for coding and training.
pub type Coding = f32;
/// Tensor in coding precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensor in gradient-check precision.
pub type Tensor64 = tensor::Tensor<f64>;
