//! Differentiable operations recorded on a [`Graph`](crate::autodiff::Graph).
//!
//! Every op is an inherent method on `Graph` returning a new [`Var`](crate::autodiff::Var).

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod resize;
mod shape;

pub(crate) mod gemm;

pub use conv::{conv2d_reference, conv_out_extent, conv_transpose_out_extent, Conv2dSpec};
pub use elementwise::Activation;
pub use norm::LAYER_NORM_EPS;
pub use pool::PoolKind;
pub use shape::shuffle_permutation;
