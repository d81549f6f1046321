//! Epitomic convolution networks: mini-epitome and topographic layers that
//! replace conv + max-pool pairs, plus the baseline layers, an SGD harness,
//! dataset loaders, and a finite-difference gradient checker.
//!
//! The heavy lifting happens on plain dense 4-axis tensors (`N x C x H x W`)
//! with an im2col + GEMM kernel; everything is deterministic given a seed.

pub mod data;
pub mod epitome;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{PatchMatrix, Tensor};
