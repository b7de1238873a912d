//! Bidirectional multiscale feature aggregation for speaker embeddings.
//!
//! A small reverse-mode tensor library with hand-written kernels, a ResNet34
//! backbone, top-down / bottom-up aggregation branches with attentional
//! fusion, AM-softmax training, and verification metrics.

pub mod afm;
pub mod aggregation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod manifest;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
