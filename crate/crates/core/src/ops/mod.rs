//! Differentiable operations, each implemented as methods on [`crate::Tape`].

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod softmax;

pub use conv::conv_output_extent;
pub use softmax::masked_softmax;
