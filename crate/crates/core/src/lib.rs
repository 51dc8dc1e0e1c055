//! Re-parameterizable 1-D convolutional wake-word detection.
//!
//! A multi-branch training graph ([`model::build_repcnn`]) is trained with
//! focal loss and hard-negative mining ([`train`]), folded into an equivalent
//! single-branch graph ([`reparam::fuse_model`]) and run frame by frame
//! ([`stream`]) on MFCC features ([`features`]). [`eval`] computes detection
//! metrics and latency/memory benchmarks.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod io;
pub mod model;
pub mod nn;
pub mod repblock;
pub mod reparam;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Architecture, GraphMode, Layer, ModelGraph, RepCnnConfig};
pub use tensor::Tensor;
