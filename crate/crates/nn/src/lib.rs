//! CPU building blocks for small residual networks: channel-major activations,
//! convolution / batch-norm / pooling / dense layers with hand-written backward
//! passes, a residual backbone, and the Adam optimizer.
//!
//! Every layer caches what its backward pass needs during `forward`; calling
//! `backward` accumulates parameter gradients and returns the input gradient.
//! All arithmetic is single-threaded and therefore bit-reproducible.

mod gemm;
#[cfg(test)]
mod testutil;

pub mod activation;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;
pub mod resnet;
pub mod tensor;

pub use activation::Relu;
pub use conv::Conv2d;
pub use linear::{Linear, Mlp};
pub use norm::BatchNorm2d;
pub use optim::{Adam, AdamConfig};
pub use param::{Param, Parameterized};
pub use pool::{GlobalAvgPool, MaxPool2d};
pub use resnet::{BackboneConfig, BasicBlock, ResidualSegment, Stem};
pub use tensor::{FeatureMap, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward called without a cached forward pass in {0}")]
    NoCache(&'static str),
    #[error("parameter layout changed: {0}")]
    ParamLayout(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Whether batch statistics are used (and running statistics updated).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
