//! Differentiable kernels recorded on a [`Tape`](crate::autograd::Tape).

pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod reduce;
pub mod shape;
pub mod upsample;

pub use activation::Activation;
pub use conv::{Axis1d, Conv1dSpec, Conv2dSpec};
pub use elementwise::{binary_values, broadcast_shape, BinaryOp};
pub use norm::{BatchStats, NORM_EPS};
pub use reduce::{Axes, ReduceKind};
