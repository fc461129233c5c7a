//! Training and knowledge transfer for compact encoder-decoder segmentation
//! networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`kernels`], [`gradcheck`], [`rng`]: a small
//!   reverse-mode autodiff engine with exactly the operators the models need.
//! - [`model`]: pooling-index encoder-decoders, a skip-fusion FCN analog, the
//!   two-domain ensemble with a residual fusion head, and checkpoints.
//! - [`loss`] and [`metrics`]: weighted cross-entropy, balanced gradient
//!   contribution, distillation losses, confusion matrices.
//! - [`data`]: procedural dense, sparse and unlabeled street scenes, image
//!   and manifest I/O, batch samplers.
//! - [`train`]: plain SGD and conjugate gradient with a bounded line search,
//!   the end-to-end training strategies, divergence detection, evaluation.
//! - [`distill`]: teacher prediction caches and the transfer methods.

pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, NodeId};
pub use rng::RngState;
pub use tensor::{DType, Scalar, Tensor};
