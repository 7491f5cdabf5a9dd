//! Cross-modal contrastive alignment for wearable-sensor streams.
//!
//! The crate trains lightweight encoders that map inertial (IMU) windows and
//! motion-capture windows onto the unit hypersphere shared with a frozen
//! anchor embedding space (text or video). Everything is built on a small
//! dense-tensor core with tape-based reverse-mode differentiation, seeded
//! end to end so that training runs and on-disk artifacts are reproducible
//! bit for bit.
//!
//! All numeric code is generic over [`Scalar`]; `f64` is the precision used
//! for training and gradient verification, `f32` for dataset blobs and
//! inference-only paths.

pub mod autodiff;
pub mod contrastive;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod signal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Double-precision tensor, the default for training and tests.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor, used for dataset blobs and inference.
pub type Tensor32 = Tensor<f32>;
