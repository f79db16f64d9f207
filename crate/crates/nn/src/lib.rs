//! A deliberately small tensor engine for CPU training of the spatial encoder
//! and fusion heads.
//!
//! There is no autograd tape. Every layer caches what it needs during
//! `forward` and implements an exact `backward`, accumulating parameter
//! gradients in place. Every backward pass is checked against central finite
//! differences in double precision (see [`gradcheck`]).
//!
//! All layers are generic over [`Scalar`] so the same code runs in `f64` for
//! verification and `f32` for training.

pub mod activation;
pub mod conv;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;
pub mod scalar;
pub mod tensor;

pub use activation::{LeakyRelu, Relu, Sigmoid};
pub use conv::{Conv2d, ConvSpec};
pub use dropout::Dropout;
pub use error::{NnError, Result};
pub use init::{gaussian_init, glorot_init};
pub use linear::{Dense, GroupDense};
pub use norm::BatchNorm2d;
pub use optim::Adam;
pub use param::{Buffer, Module, Parameter};
pub use pool::MaxPool2d;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Train or eval behaviour for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
