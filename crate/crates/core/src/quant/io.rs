//! Quantized-model files: the base model file (with its current batch-norm
//! statistics) followed by a `QTAB` section.
//!
//! ```text
//! "QTAB" u32 length
//!   u32 bits  u8 enabled  u32 entry_count
//!   entry: u32 layer  u8 site (0 weight, 1 post-relu activation, 2 residual activation)
//!          u8 set  f64 l  f64 u  u32 b
//! ```

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{DfqError, Result};
use crate::nn::io::{decode_with_sections, encode_with_sections};
use crate::nn::ModelGraph;
use crate::quant::model::{QuantModel, SiteKind};
use crate::quant::params::QuantParams;

pub const QUANT_TAG: [u8; 4] = *b"QTAB";

pub fn encode_quant_model(qm: &QuantModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(qm.bits());
    w.u8(qm.is_enabled() as u8);
    let layers = qm.base().layers.len();
    let mut entries: Vec<(usize, u8, Option<QuantParams>)> = Vec::new();
    for i in 0..layers {
        if let Some(p) = qm.weight_quant(i) {
            entries.push((i, 0, Some(*p)));
        }
        if let Some(kind) = qm.site_kind(i) {
            let code = match kind {
                SiteKind::PostRelu => 1,
                SiteKind::Residual => 2,
            };
            entries.push((i, code, qm.act_quant(i).copied()));
        }
    }
    w.u32(entries.len() as u32);
    for (layer, site, p) in entries {
        w.u32(layer as u32);
        w.u8(site);
        w.u8(p.is_some() as u8);
        let (l, u, b) = p.map_or((0.0, 0.0, 0), |p| (p.lower(), p.upper(), p.bits()));
        w.f64(l);
        w.f64(u);
        w.u32(b);
    }
    encode_with_sections(qm.base(), &[(QUANT_TAG, w.buf)])
}

pub fn decode_quant_model(bytes: &[u8]) -> Result<QuantModel> {
    let (base, sections) = decode_with_sections(bytes)?;
    let body = sections
        .iter()
        .find(|(tag, _)| *tag == QUANT_TAG)
        .map(|(_, b)| b)
        .ok_or_else(|| DfqError::Format("model file has no quantization table".into()))?;
    let mut r = Reader::new(body, "quantization table");
    let bits = r.u32()?;
    let enabled = r.u8()? != 0;
    let count = r.u32()? as usize;
    let n = base.layers.len();
    let mut weight = vec![None; n];
    let mut act = vec![None; n];
    for _ in 0..count {
        let layer = r.u32()? as usize;
        let site = r.u8()?;
        let set = r.u8()? != 0;
        let (l, u, b) = (r.f64()?, r.f64()?, r.u32()?);
        if layer >= n {
            return Err(DfqError::HeaderMismatch(format!(
                "quantization entry for layer {layer} of {n}"
            )));
        }
        let p = if set { Some(QuantParams::new(l, u, b)?) } else { None };
        match site {
            0 => weight[layer] = p,
            1 | 2 => act[layer] = p,
            other => return Err(DfqError::Format(format!("unknown site code {other}"))),
        }
    }
    if r.remaining() != 0 {
        return Err(DfqError::HeaderMismatch("trailing bytes in quantization table".into()));
    }
    QuantModel::from_parts(base, bits, weight, act, enabled)
}

pub fn save_quant_model(qm: &QuantModel, path: &Path, overwrite: bool) -> Result<()> {
    write_file(path, &encode_quant_model(qm), overwrite)
}

pub fn load_quant_model(path: &Path) -> Result<QuantModel> {
    decode_quant_model(&read_file(path)?)
}

/// Contents of a model file of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    FullPrecision(ModelGraph),
    Quantized(QuantModel),
}

/// Load a model file, quantized if it carries a quantization table.
pub fn load_any_model(path: &Path) -> Result<AnyModel> {
    let bytes = read_file(path)?;
    let (base, sections) = decode_with_sections(&bytes)?;
    if sections.iter().any(|(tag, _)| *tag == QUANT_TAG) {
        decode_quant_model(&bytes).map(AnyModel::Quantized)
    } else {
        Ok(AnyModel::FullPrecision(base))
    }
}
