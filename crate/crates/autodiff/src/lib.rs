//! Minimal dense-array numeric engine with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records forward operations over [`Tensor`] values and replays them
//! in reverse to produce gradients for the trainable parameters held in a
//! [`ParamStore`]. Everything runs single-threaded and deterministically; the
//! element type is `f32` for training and `f64` for gradient verification.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
pub mod rng;
mod scalar;
pub mod schedule;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use optim::{AdamW, AdamWConfig};
pub use scalar::{DType, Scalar};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
