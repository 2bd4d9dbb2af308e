//! Res-Dense fusion classifier for CT-scan series.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a tape-based reverse-mode
//!   differentiation engine covering every op the model needs.
//! - [`model`]: residual and densely connected branch generators, fused by
//!   projection and addition ahead of global average pooling.
//! - [`data`]: dataset scanning, seeded splits, PGM decoding, resizing,
//!   rescaling and augmentation.
//! - [`train`]: RMSprop with a two-phase freeze schedule and binary
//!   checkpoints.
//! - [`eval`]: series-level probability averaging and macro-F1.
//! - [`gradcheck`]: finite-difference verification harness.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Scalar, Tensor};
