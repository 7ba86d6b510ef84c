//! Dynamic MR image reconstruction toolkit.
//!
//! The crate bundles everything needed to train and evaluate cascaded
//! residual dense networks (CRDN) for undersampled dynamic MRI:
//!
//! - [`tensor`]: a small n-dimensional array engine with a reverse-mode tape.
//! - [`kspace`]: centered orthonormal FFTs, k-t sampling masks and the
//!   undersampled forward model `K_u = F_u S + e`.
//! - [`network`]: the k-space prediction block, residual dense blocks and the
//!   data-consistency cascade.
//! - [`losses`]: MSE plus anisotropic, isotropic and higher-degree TV penalties.
//! - [`training`]: He initialization, Adam, exponential LR decay and the
//!   mini-batch training loop.
//! - [`data`]: synthetic dynamic phantoms, patch shearing, the `DMRI v1`
//!   dataset format and MSE/PSNR/SSIM metrics.
//! - [`baseline`]: TV-regularized compressed-sensing reconstruction.
//! - [`gradcheck`]: finite-difference gradient suites for every layer type.

pub mod baseline;
pub mod data;
mod error;
pub mod gradcheck;
pub mod kspace;
pub mod losses;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
