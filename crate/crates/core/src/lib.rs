//! Data-free post-training quantization.
//!
//! A pretrained full-precision classifier is quantized without touching its
//! training data: calibration inputs are synthesized from the model itself,
//! activation clipping ranges are taken from inputs that maximize the target
//! logit, batch-norm statistics are re-estimated under quantized inference,
//! and the result can optionally be fine-tuned by distillation with
//! straight-through gradients.

pub mod autograd;
mod binio;
pub mod calibration;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod synthesis;
pub mod tensor;

pub use binio::write_file;
pub use error::{DfqError, ErrorClass, Result};
pub use tensor::Tensor;
