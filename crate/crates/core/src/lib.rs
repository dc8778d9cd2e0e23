//! Desk-scale dynamic early-exit transformer tracker.
//!
//! The crate is built around a small tape-based autodiff engine generic over
//! the scalar type: `f32` for training and inference, `f64` for gradient
//! verification. On top of it sit a joint template-search encoder with an
//! IoU token, per-exit decisioner branches with feature recycling,
//! target-aware self-distillation, threshold-driven adaptive inference, and
//! a speed-precision evaluation harness.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod evaluation;
pub mod exits;
pub mod grad_check;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{DytxError, Result};
pub use rng::RandomState;
pub use scalar::Scalar;

/// Training/inference precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification precision.
pub type Tensor64 = tensor::Tensor<f64>;
