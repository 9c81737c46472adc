//! Context compression into soft tokens: a causal encoder with LoRA,
//! group merging, a layer semantic alignment block, and a decoder that reads
//! the soft tokens as layer-0 hidden states. Includes the appended-token
//! autoencoder baseline, the evaluation metrics and an inference cost model.

pub mod autodiff;
pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tcp;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
