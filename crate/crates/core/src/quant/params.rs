//! Uniform affine quantization over a clipping range `[l, u]`.
//!
//! `Δ = (u − l) / (2^b − 1)`, `Q(x) = clamp(round((x − l) / Δ), 0, 2^b − 1)`,
//! `D(q) = q·Δ + l`. Rounding is half-away-from-zero (`f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{DfqError, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Interval length for `b`-bit codes over `[l, u]`.
pub fn compute_delta(l: f64, u: f64, bits: u32) -> Result<f64> {
    check_bits(bits)?;
    if !(u > l) || !l.is_finite() || !u.is_finite() {
        return Err(DfqError::InvalidArgument(format!(
            "clipping range needs finite u > l, got l={l}, u={u}"
        )));
    }
    Ok((u - l) / levels(bits))
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(DfqError::InvalidArgument(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

fn levels(bits: u32) -> f64 {
    ((1u32 << bits) - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    lower: f64,
    upper: f64,
    bits: u32,
    delta: f64,
}

impl QuantParams {
    pub fn new(lower: f64, upper: f64, bits: u32) -> Result<Self> {
        let delta = compute_delta(lower, upper, bits)?;
        Ok(QuantParams {
            lower,
            upper,
            bits,
            delta,
        })
    }

    /// Like [`QuantParams::new`], but a degenerate range `u <= l` is widened to
    /// a small band above `l` instead of rejected. The flag reports whether
    /// widening happened.
    pub fn new_widened(lower: f64, upper: f64, bits: u32) -> Result<(Self, bool)> {
        if upper > lower {
            return Ok((QuantParams::new(lower, upper, bits)?, false));
        }
        let band = f32::EPSILON as f64 * lower.abs().max(1.0);
        Ok((QuantParams::new(lower, lower + band, bits)?, true))
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn quantize_value(&self, x: f64) -> u32 {
        let q = ((x - self.lower) / self.delta).round();
        q.clamp(0.0, self.max_code() as f64) as u32
    }

    pub fn dequantize_code(&self, q: u32) -> f64 {
        q as f64 * self.delta + self.lower
    }

    pub fn fake_quant_value(&self, x: f64) -> f64 {
        self.dequantize_code(self.quantize_value(x))
    }
}

pub fn quantize(x: &[f64], p: &QuantParams) -> Vec<u32> {
    x.iter().map(|&v| p.quantize_value(v)).collect()
}

pub fn dequantize(codes: &[u32], p: &QuantParams) -> Result<Vec<f64>> {
    codes
        .iter()
        .map(|&q| {
            if q > p.max_code() {
                Err(DfqError::InvalidArgument(format!(
                    "code {q} outside [0, {}]",
                    p.max_code()
                )))
            } else {
                Ok(p.dequantize_code(q))
            }
        })
        .collect()
}

/// Element-wise quantize-dequantize.
pub fn fake_quant_slice(x: &[f64], p: &QuantParams) -> Vec<f64> {
    x.iter().map(|&v| p.fake_quant_value(v)).collect()
}
