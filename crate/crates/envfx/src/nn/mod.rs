//! A small reverse-mode autodiff engine over `f64` arrays, plus Adam.
//!
//! Deliberately minimal: just the ops the conversion network needs, each
//! with a hand-written backward pass. Gradient correctness is enforced by
//! finite-difference tests here and at the model level.

pub mod adam;
pub mod init;
pub mod ops;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamSlot};
pub use tensor::Tensor;
