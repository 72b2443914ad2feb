//! Differentiable tensor operations. Each op is available as a plain
//! function on [`Tensor`](crate::Tensor) and as a recording method on
//! [`Tape`](crate::Tape).

mod conv;
mod elementwise;
mod reduce;
mod softmax;
mod upsample;

pub use conv::{conv2d, ConvGeometry};
pub use elementwise::{apply_elementwise, sigmoid, Binary, Elementwise};
pub use reduce::{reduce, Reduction};
pub use softmax::softmax_channels;
pub use upsample::upsample_bilinear;
