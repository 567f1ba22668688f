//! Model file format.
//!
//! ```text
//! "DFQM"  u32 version
//! u32 class_count  u32 channels  u32 height  u32 width
//! u32 layer_count
//! per layer: u32 kind, u32 × 5 hyperparameters, u32 tensor_count,
//!            per tensor: u32 ndim, u32 × ndim dims, u32 numel
//! payload:   every declared tensor as little-endian f32, in declaration order
//! sections:  (4-byte tag, u32 byte length, body)*  until end of file
//! ```
//!
//! Hyperparameter slots by kind: conv2d `(in, out, kernel, stride, padding)`,
//! batchnorm2d `(channels, eps as f32 bits, 0, 0, 0)`, avgpool/maxpool
//! `(kernel, 0…)`, linear `(in, out, 0…)`, residual-add `(from, 0…)`.
//! Batch-norm tensors are `gamma, beta, mean, std`.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{DfqError, Result};
use crate::nn::graph::{BatchNorm2d, BnStats, Conv2d, Layer, Linear, ModelGraph, Param};

pub const MODEL_MAGIC: [u8; 4] = *b"DFQM";
pub const MODEL_VERSION: u32 = 1;

pub(crate) type Section = ([u8; 4], Vec<u8>);

fn kind_code(l: &Layer) -> u32 {
    match l {
        Layer::Conv2d(_) => 1,
        Layer::BatchNorm2d(_) => 2,
        Layer::Relu => 3,
        Layer::AvgPool { .. } => 4,
        Layer::MaxPool { .. } => 5,
        Layer::Linear(_) => 6,
        Layer::ResidualAdd { .. } => 7,
        Layer::Flatten => 8,
    }
}

fn hyper(l: &Layer) -> [u32; 5] {
    let u = |v: usize| v as u32;
    match l {
        Layer::Conv2d(c) => [
            u(c.in_channels),
            u(c.out_channels),
            u(c.kernel),
            u(c.stride),
            u(c.padding),
        ],
        Layer::BatchNorm2d(b) => [u(b.channels), b.stats.eps.to_bits(), 0, 0, 0],
        Layer::AvgPool { kernel } | Layer::MaxPool { kernel } => [u(*kernel), 0, 0, 0, 0],
        Layer::Linear(l) => [u(l.in_features), u(l.out_features), 0, 0, 0],
        Layer::ResidualAdd { from } => [u(*from), 0, 0, 0, 0],
        Layer::Relu | Layer::Flatten => [0; 5],
    }
}

/// Tensors of a layer as (shape, values), in file order.
fn tensors(l: &Layer) -> Vec<(Vec<usize>, &[f32])> {
    match l {
        Layer::BatchNorm2d(b) => vec![
            (b.gamma.shape().to_vec(), b.gamma.data()),
            (b.beta.shape().to_vec(), b.beta.data()),
            (vec![b.channels], &b.stats.mean[..]),
            (vec![b.channels], &b.stats.std[..]),
        ],
        other => other
            .params()
            .into_iter()
            .map(|p| (p.shape().to_vec(), p.data()))
            .collect(),
    }
}

pub(crate) fn encode_with_sections(m: &ModelGraph, sections: &[Section]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u32(m.class_count as u32);
    for d in m.input_shape {
        w.u32(d as u32);
    }
    w.u32(m.layers.len() as u32);
    for l in &m.layers {
        w.u32(kind_code(l));
        for h in hyper(l) {
            w.u32(h);
        }
        let ts = tensors(l);
        w.u32(ts.len() as u32);
        for (shape, data) in &ts {
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u32(d as u32);
            }
            w.u32(data.len() as u32);
        }
    }
    for l in &m.layers {
        for (_, data) in tensors(l) {
            w.f32s(data);
        }
    }
    for (tag, body) in sections {
        w.bytes(tag);
        w.u32(body.len() as u32);
        w.bytes(body);
    }
    w.buf
}

pub fn encode_model(m: &ModelGraph) -> Vec<u8> {
    encode_with_sections(m, &[])
}

struct LayerHeader {
    kind: u32,
    hyper: [u32; 5],
    shapes: Vec<Vec<usize>>,
}

fn expected_shapes(h: &LayerHeader, index: usize) -> Result<Vec<Vec<usize>>> {
    let [a, b, c, _, _] = h.hyper.map(|v| v as usize);
    Ok(match h.kind {
        1 => vec![vec![b, a, c, c]],
        2 => vec![vec![a]; 4],
        3..=5 | 7 | 8 => vec![],
        6 => vec![vec![b, a], vec![b]],
        k => {
            return Err(DfqError::Format(format!(
                "layer {index}: unknown layer kind code {k}"
            )))
        }
    })
}

pub(crate) fn decode_with_sections(bytes: &[u8]) -> Result<(ModelGraph, Vec<Section>)> {
    let mut r = Reader::new(bytes, "model file");
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(DfqError::VersionMismatch {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let class_count = r.u32()? as usize;
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let layer_count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(layer_count.min(4096));
    for i in 0..layer_count {
        let kind = r.u32()?;
        let mut hp = [0u32; 5];
        for v in &mut hp {
            *v = r.u32()?;
        }
        let count = r.u32()? as usize;
        let mut shapes = Vec::new();
        for t in 0..count {
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(DfqError::HeaderMismatch(format!(
                    "layer {i} tensor {t}: implausible rank {ndim}"
                )));
            }
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = r.u32()? as usize;
            if dims.iter().product::<usize>() != numel {
                return Err(DfqError::HeaderMismatch(format!(
                    "layer {i} tensor {t}: shape {dims:?} declares {numel} elements"
                )));
            }
            shapes.push(dims);
        }
        let h = LayerHeader {
            kind,
            hyper: hp,
            shapes,
        };
        let want = expected_shapes(&h, i)?;
        if want != h.shapes {
            return Err(DfqError::HeaderMismatch(format!(
                "layer {i}: tensor shapes {:?} disagree with hyperparameters (expected {want:?})",
                h.shapes
            )));
        }
        headers.push(h);
    }

    let mut layers = Vec::with_capacity(headers.len());
    for h in &headers {
        let mut payload = Vec::new();
        for s in &h.shapes {
            payload.push(Param::new(s.clone(), r.f32s(s.iter().product())?)?);
        }
        let [a, b, c, d, e] = h.hyper.map(|v| v as usize);
        let layer = match h.kind {
            1 => Layer::Conv2d(Conv2d {
                in_channels: a,
                out_channels: b,
                kernel: c,
                stride: d,
                padding: e,
                weight: payload.remove(0),
            }),
            2 => {
                let mut it = payload.into_iter();
                let (gamma, beta, mean, std) = (
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                    it.next().unwrap(),
                );
                Layer::BatchNorm2d(BatchNorm2d {
                    channels: a,
                    gamma,
                    beta,
                    stats: BnStats {
                        mean: mean.data().to_vec(),
                        std: std.data().to_vec(),
                        eps: f32::from_bits(h.hyper[1]),
                    },
                })
            }
            3 => Layer::Relu,
            4 => Layer::AvgPool { kernel: a },
            5 => Layer::MaxPool { kernel: a },
            6 => {
                let bias = payload.pop().unwrap();
                let weight = payload.pop().unwrap();
                Layer::Linear(Linear {
                    in_features: a,
                    out_features: b,
                    weight,
                    bias,
                })
            }
            7 => Layer::ResidualAdd { from: a },
            _ => Layer::Flatten,
        };
        layers.push(layer);
    }

    let mut sections = Vec::new();
    while r.remaining() > 0 {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u32()? as usize;
        sections.push((tag, r.take(len)?.to_vec()));
    }
    let model = ModelGraph::new(layers, class_count, input_shape)
        .map_err(|e| DfqError::HeaderMismatch(format!("decoded model is inconsistent: {e}")))?;
    Ok((model, sections))
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    decode_with_sections(bytes).map(|(m, _)| m)
}

pub fn save_model(m: &ModelGraph, path: &Path, overwrite: bool) -> Result<()> {
    write_file(path, &encode_model(m), overwrite)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    decode_model(&read_file(path)?)
}
