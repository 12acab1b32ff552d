//! Forward kernels over [`Tensor`](crate::tensor::Tensor) values and their taped,
//! differentiable counterparts on [`Tape`](crate::tape::Tape).

pub mod conv;
pub mod deform;
pub mod elementwise;
pub mod linear;
pub mod norm;
pub mod reduce;

pub use conv::{conv2d, Padding};
pub use deform::{bilinear_sample, deform_conv2d};
pub use elementwise::{gather_rows, sigmoid, silu, softplus, Broadcast, ZERO_ROW};
pub use linear::linear;
pub use norm::{layer_norm, LAYER_NORM_EPS};
pub use reduce::{global_avg_pool, sum_over_frames};
