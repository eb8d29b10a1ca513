//! A small reverse-mode automatic differentiation engine.
//!
//! Values live in row-major [`Tensor`]s; operations on [`Var`] handles are
//! recorded on a [`Tape`] and differentiated with [`Tape::backward`]. The
//! engine is generic over [`Real`] so models run in `f32` while gradient
//! checks run the same code in `f64`.

pub mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::Conv2dSpec;
pub use ops::norm::BatchStats;
pub use ops::shape::concat;
pub use ops::softmax::softmax_slice;
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Binder, Mode, ParamStore};
pub use real::{gemm, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
