//! Spatiotemporal selective state-space models for video pose estimation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`ops`], [`gradcheck`]: dense tensors, reverse-mode
//!   differentiation, and the forward/backward kernels the model needs.
//! - [`ssm`]: zero-order-hold discretization, the sequential and associative
//!   (parallel) selective scans, and the fused differentiable scan.
//! - [`routes`]: the six space-time flattening routes and windowed tubelets.
//! - [`blocks`]: the global block (channel attention, six-route scan, modulated
//!   merging, gated stream, FFN), the local refinement block, and the head.
//! - [`pipeline`]: clip construction, synthetic data, loss, AdamW, PCK,
//!   checkpoints, and the training loop.
//! - [`checks`]: the finite-difference suite over ops, blocks and a toy model.
//! - [`bench`]: scan vs. full self-attention scaling measurements.
//!
//! Spatial tensors are channel-last: a feature sequence is `[T, h, w, D]`.

pub mod bench;
pub mod checks;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod routes;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
