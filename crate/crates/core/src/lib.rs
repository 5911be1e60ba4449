//! Vector-quantized time series generation with a learned neural mapper.
//!
//! Stage 1 trains an encoder/decoder with a codebook, stage 2 a masked-token
//! prior over codebook indices, and stage 3 a U-Net that maps stochastically
//! quantized reconstructions back onto the data. Samples are scored with FID,
//! IS and per-class FID over ROCKET or FCN features.

pub mod checkpoint;
pub mod dataset;
mod error;
pub mod fcn;
pub mod features;
pub mod kv;
pub mod mapper;
pub mod metrics;
pub mod nn;
pub mod rocket;
pub mod tau_search;
pub mod train;
pub mod tsgen;
pub mod vq;

pub use error::{Error, Result};
