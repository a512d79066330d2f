//! Differentially private convolutional conditional neural processes.
//!
//! The crate covers privacy accounting for Gaussian and functional
//! mechanisms, Gaussian-process utilities, exact grid sampling for product
//! kernels, the private set-convolution encoder, synthetic task generation,
//! a small reverse-mode network toolkit, the model itself and reference
//! predictors used for evaluation.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod dpsetconv;
pub mod error;
pub mod gp;
pub mod grid;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod serial;
pub mod taskgen;

pub use error::{Error, Result};
