//! Consensus-aware dynamic convolution for co-saliency detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode differentiation and a
//!   finite-difference oracle.
//! - [`consensus`]: multi-scale pooling and cross-image self-attention that
//!   summarise an image group into a consensus feature.
//! - [`kernelgen`]: dynamic kernels (1×1 and depthwise-separable 3×3,
//!   per-image and group-wide) generated from the consensus feature.
//! - [`searchnet`]: dynamic-convolution search, the U-shaped network, deep
//!   supervision and SGD training.
//! - [`synthesis`]: Poisson copy-and-blend data synthesis.
//! - [`metrics`]: MAE, max F-measure, S-measure and E-measure.

pub mod consensus;
pub mod error;
pub mod fsutil;
pub mod gradsuite;
pub mod image_io;
pub mod kernelgen;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod searchnet;
pub mod synthesis;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{Tensor, Var};
