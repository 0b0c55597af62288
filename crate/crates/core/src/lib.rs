//! Convolution with circular kernels.
//!
//! A circular kernel of size `K` samples `K²` points on concentric rings instead
//! of a square grid. Because the fractional sample positions are fixed, the
//! bilinear interpolation that reads them can be folded into a constant sparse
//! `K²×K²` matrix `B`; multiplying the kernel weights by `B` once per forward
//! pass turns a circular convolution into an ordinary one.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] – square and circular sample point sets.
//! * [`transform`] – the bilinear transformation matrix and its actions.
//! * [`tensor`], [`autodiff`], [`nn`], [`train`] – a small dense tensor engine
//!   with tape-based reverse-mode differentiation, layers, and an SGD trainer.
//! * [`integrated`] – layers that switch between square and circular sampling.
//! * [`nas`] – first-order differentiable architecture search.
//! * [`experiments`] – synthetic data, warping, robustness sweeps and reports.

pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod gradcheck;
pub mod identity;
pub mod integrated;
pub mod nas;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use geometry::{KernelShape, SamplePoint, SamplePointSet};
pub use tensor::{DType, Scalar, Tensor};
pub use transform::TransformMatrix;
