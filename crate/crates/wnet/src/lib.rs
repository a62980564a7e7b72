//! Parsing-guided face super-resolution in pure Rust.
//!
//! The crate builds from the bottom up:
//!
//! - [`tensor`]: dense rank-4 (N, C, H, W) tensors over `f32`/`f64`.
//! - [`kernels`]: forward/backward numeric kernels (convolution via im2col
//!   and GEMM, pooling, resampling, normalization, softmax, matmul).
//! - [`graph`]: a reverse-mode autodiff tape over those kernels.
//! - [`params`]: named, ordered parameter storage shared by the layers.
//! - [`layers`]: convolution/normalization/attention building blocks.
//! - [`parsing`], [`lpf`], [`model`]: the face-parsing prior network, the
//!   feature-fusion block, and the full W-shaped super-resolution model.
//! - [`loss`], [`metrics`]: training objectives and image-quality metrics.
//! - [`data`]: synthetic face dataset generation, resampling, PNG I/O.
//! - [`optim`], [`train`], [`checkpoint`], [`config`]: Adam, the training
//!   loop, serialization, and TOML run configuration.
//! - [`gradcheck`]: finite-difference verification of the whole stack.
//!
//! Determinism is a crate-wide contract: same seed and config produce
//! byte-identical parameters, logs, and checkpoints. The optional
//! `parallel` feature speeds up the heavy kernels without changing any
//! result bitwise.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod lpf;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod parsing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Shape, Tensor};
