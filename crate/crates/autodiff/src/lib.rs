//! Reverse-mode autodiff for the prompt-cascade laboratory.
//!
//! The crate provides four pieces:
//! - [`tensor::Tensor`]: shape plus flat row-major storage;
//! - [`tape::Tape`]: a Wengert tape of matrix kernels with one-shot
//!   [`tape::Tape::backward`];
//! - [`optim`]: named [`optim::Parameter`]s with a trainable flag and
//!   [`optim::Sgd`];
//! - [`checkpoint`]: the binary tensor format with a JSON manifest, and
//!   [`gradcheck`], the finite-difference oracle used by the test suites.
//!
//! Everything is generic over [`scalar::Scalar`] (`f32` or `f64` via
//! `num-traits`). The unqualified names exported here default to `f64`,
//! the working precision of the laboratory.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use optim::{Adam, Parameter, Sgd};
pub use scalar::Scalar;
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;

/// Single-precision aliases; the default type parameter on the generic
/// types makes the unqualified names `f64`.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
pub type Parameter32 = optim::Parameter<f32>;
