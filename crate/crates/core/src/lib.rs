//! Dual-branch convolutional autoencoder for infrared/visible image fusion.
//!
//! The crate is self-contained: tensors and reverse-mode differentiation live
//! in [`tensor`], the network in [`model`], the training objective in
//! [`losses`], test-time feature fusion in [`fusion`], tile preparation in
//! [`data`], optimisation in [`training`] and the fusion-quality indices in
//! [`metrics`].

pub mod data;
pub mod dbfw;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Shape, Tensor, Var};
