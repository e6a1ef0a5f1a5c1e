//! Frame-level speaker feature learning with full-info training.

pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod featio;
pub mod gradcheck;
pub mod net;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
