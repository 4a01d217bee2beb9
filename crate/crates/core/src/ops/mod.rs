//! Differentiable building blocks: convolution, pooling, upsampling,
//! channel concatenation, fusion and pointwise nonlinearities.
//!
//! Each submodule holds the plain tensor kernels plus the [`Graph`](crate::Graph)
//! method that records them.

pub mod concat;
pub mod conv;
pub mod pointwise;
pub mod pool;
pub mod upsample;

pub use concat::{concat_forward, fuse_forward};
pub use conv::{conv2d_forward, Conv2dSpec};
pub use pointwise::{sigmoid_scalar, softplus, Pointwise};
pub use pool::maxpool2_forward;
pub use upsample::{bilinear_kernel, upsample_bilinear};
