//! Tensor operations. Free functions work on plain [`Tensor`](crate::Tensor)
//! values; the matching methods on [`Var`](crate::Var) record them on the tape.

mod basic;
mod conv;
mod pool;
mod resize;

pub use basic::{concat_channels, mse, softmax};
pub use conv::{conv2d, ConvGeometry};
pub use pool::avg_pool2d;
pub use resize::{
    bicubic_resize, bilinear_resize, cubic_weight, resize, source_coord, Interpolation,
    CATMULL_ROM_A,
};
