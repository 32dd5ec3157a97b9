//! Channel independent directional convolution (CIDC) and the multi-scale
//! CIDC network, with analytic gradients and a small training harness.

pub mod cidc;
pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{bilinear_resize_2d, Tensor};
