//! Multi-stage multi-recursive-input fully convolutional networks (M²FCN)
//! for membrane boundary detection, built on a small reverse-mode
//! differentiation core.
//!
//! A network is a chain of sub-nets. Every sub-net produces one side output
//! per level; the sigmoid side outputs of stage `m-1` are stacked with the
//! raw image to form the input of stage `m`. Each stage also fuses its side
//! outputs with learned weights, and the fused output of the last stage is
//! the boundary probability map.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod objective;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod subnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, ParamId, Var};
pub use tensor::Tensor;
