//! Gradient filtering for memory- and compute-efficient convolution
//! back-propagation, with reference convolution kernels, a spectral checker,
//! an analytic cost model and a small fine-tuning harness.

pub mod cli;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod filter;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
