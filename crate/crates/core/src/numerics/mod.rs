//! Dense matrices, the kernels used by attention and the compressor, and a
//! small gradient tape covering exactly those kernels.

pub mod conv;
pub mod tape;
pub mod tensor;

pub use conv::conv1d;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, relu, row_normalize, softmax_cols, Tensor2};
