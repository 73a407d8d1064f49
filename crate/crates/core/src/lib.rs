//! Perceptual prompt injection: frozen encoder [CLS] states, linearly projected
//! and written into a reserved slot of a frozen causal decoder's deep layers.

pub mod adapt;
pub mod autodiff;
pub mod eval;
pub mod error;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
