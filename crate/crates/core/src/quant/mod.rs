//! Uniform quantization and fake-quantized models.

mod io;
mod model;
mod params;

pub use io::{
    decode_quant_model, encode_quant_model, load_any_model, load_quant_model, save_quant_model,
    AnyModel, QUANT_TAG,
};
pub use model::{quantize_weights, QuantModel, SiteKind};
pub use params::{
    compute_delta, dequantize, fake_quant_slice, quantize, QuantParams, MAX_BITS, MIN_BITS,
};
