use std::collections::BTreeMap;

use crate::autograd::{Moments, Tape, Var};
use crate::error::{DfqError, Result};
use crate::nn::graph::{BnStats, Layer, ModelGraph};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// Which statistics batch-norm layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Stored statistics (inference).
    EvalStats,
    /// Statistics of the current batch (training / re-estimation).
    TrainStats,
}

/// Quantization applied during a forward pass.
#[derive(Clone, Copy)]
pub(crate) struct QuantHooks<'a> {
    /// Indexed by layer; `Some` for weight-quantized layers.
    pub weight: &'a [Option<QuantParams>],
    /// Indexed by layer; `true` where an activation quantizer follows the layer.
    pub sites: &'a [bool],
    /// Indexed by layer; the activation range of each site, once calibrated.
    pub act: &'a [Option<QuantParams>],
    /// Let unset sites pass through unquantized (range collection).
    pub allow_unset: bool,
}

#[derive(Clone, Copy)]
pub(crate) struct ForwardOptions<'a> {
    pub mode: BnMode,
    pub probes: &'a [usize],
    /// Record differentiable per-channel mean/std of every batch-norm input.
    pub bn_input_stats: bool,
    /// Make parameters gradient-carrying leaves.
    pub trainable: bool,
    pub quant: Option<QuantHooks<'a>>,
    /// Statistics to use instead of the stored ones, in batch-norm order.
    pub bn_override: Option<&'a [BnStats]>,
}

impl<'a> ForwardOptions<'a> {
    pub fn new(mode: BnMode) -> Self {
        ForwardOptions {
            mode,
            probes: &[],
            bn_input_stats: false,
            trainable: false,
            quant: None,
            bn_override: None,
        }
    }
}

/// Differentiable per-channel statistics of one batch-norm input.
#[derive(Clone, Copy, Debug)]
pub struct BnInputStats {
    pub layer: usize,
    pub mean: Var,
    pub std: Var,
}

pub(crate) struct TapeOutput {
    pub logits: Var,
    pub probes: BTreeMap<usize, Var>,
    pub bn_inputs: Vec<BnInputStats>,
    /// Moments used for normalization in `TrainStats` mode, one per BN layer.
    pub bn_moments: Vec<(usize, Moments)>,
    /// Parameter leaves per layer, in declaration order; empty unless trainable.
    pub params: Vec<Vec<Var>>,
}

pub(crate) fn check_input(model: &ModelGraph, batch: &Tensor, mode: BnMode) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != model.input_shape {
        let mut want = vec![0];
        want.extend_from_slice(&model.input_shape);
        return Err(DfqError::shape("model input", s, &want));
    }
    if mode == BnMode::TrainStats && s[0] < 2 {
        return Err(DfqError::Contract(
            "batch statistics are undefined for a batch of one".into(),
        ));
    }
    Ok(())
}

pub(crate) fn forward_on_tape(
    model: &ModelGraph,
    tape: &mut Tape,
    input: Var,
    opts: &ForwardOptions<'_>,
) -> Result<TapeOutput> {
    check_input(model, tape.value(input), opts.mode)?;
    let mut values = Vec::with_capacity(model.layers.len() + 1);
    values.push(input);
    let mut probes = BTreeMap::new();
    let mut bn_inputs = Vec::new();
    let mut bn_moments = Vec::new();
    let mut params = Vec::with_capacity(model.layers.len());
    let mut bn_ordinal = 0;

    for (i, layer) in model.layers.iter().enumerate() {
        let x = *values.last().unwrap();
        let leaves: Vec<Var> = layer
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.to_tensor(), opts.trainable))
            .collect();
        let quantized_weight = |tape: &mut Tape, w: Var| -> Result<Var> {
            match opts.quant.and_then(|q| q.weight[i]) {
                Some(p) => tape.fake_quant(w, &p),
                None => Ok(w),
            }
        };
        let mut out = match layer {
            Layer::Conv2d(c) => {
                let w = quantized_weight(tape, leaves[0])?;
                tape.conv2d(x, w, c.stride, c.padding)?
            }
            Layer::Linear(_) => {
                let w = quantized_weight(tape, leaves[0])?;
                tape.linear(x, w, Some(leaves[1]))?
            }
            Layer::BatchNorm2d(b) => {
                if opts.bn_input_stats {
                    let mean = tape.channel_mean(x)?;
                    let std = tape.channel_std(x)?;
                    bn_inputs.push(BnInputStats { layer: i, mean, std });
                }
                let stats = match opts.bn_override {
                    Some(o) => o.get(bn_ordinal).ok_or_else(|| {
                        DfqError::InvalidArgument("batch-norm override list too short".into())
                    })?,
                    None => &b.stats,
                };
                bn_ordinal += 1;
                match opts.mode {
                    BnMode::EvalStats => tape.batchnorm_fixed(
                        x,
                        leaves[0],
                        leaves[1],
                        &stats.mean_f64(),
                        &stats.std_f64(),
                        stats.eps as f64,
                    )?,
                    BnMode::TrainStats => {
                        let (y, m) = tape.batchnorm_batch(x, leaves[0], leaves[1], stats.eps as f64)?;
                        bn_moments.push((i, m));
                        y
                    }
                }
            }
            Layer::Relu => tape.relu(x)?,
            Layer::AvgPool { kernel } => tape.avgpool(x, *kernel)?,
            Layer::MaxPool { kernel } => tape.maxpool(x, *kernel)?,
            Layer::ResidualAdd { from } => tape.add(x, values[*from])?,
            Layer::Flatten => {
                let s = tape.value(x).shape();
                let n = s[0];
                let rest = s[1..].iter().product();
                tape.reshape(x, vec![n, rest])?
            }
        };
        if opts.probes.contains(&i) {
            probes.insert(i, out);
        }
        if let Some(q) = opts.quant {
            if q.sites[i] {
                match q.act[i] {
                    Some(p) => out = tape.fake_quant(out, &p)?,
                    None if q.allow_unset => {}
                    None => return Err(DfqError::Uncalibrated { site: i }),
                }
            }
        }
        params.push(if opts.trainable { leaves } else { Vec::new() });
        values.push(out);
    }
    Ok(TapeOutput {
        logits: *values.last().unwrap(),
        probes,
        bn_inputs,
        bn_moments,
        params,
    })
}

/// Per-channel statistics of one batch-norm layer's input for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    /// Biased (population) standard deviation.
    pub std: Vec<f64>,
}

/// Result of [`model_forward`].
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Tensor,
    /// Layer output (before any activation quantizer) at each probed layer.
    pub probes: BTreeMap<usize, Tensor>,
    /// Batch statistics used for normalization; empty in `EvalStats` mode.
    pub batch_stats: Vec<BatchStats>,
}

/// Gradient-free forward pass of the full-precision model.
pub fn model_forward(
    model: &ModelGraph,
    batch: &Tensor,
    mode: BnMode,
    probes: &[usize],
) -> Result<ModelOutput> {
    let opts = ForwardOptions {
        probes,
        ..ForwardOptions::new(mode)
    };
    run_detached(model, batch, &opts)
}

pub(crate) fn run_detached(
    model: &ModelGraph,
    batch: &Tensor,
    opts: &ForwardOptions<'_>,
) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let out = forward_on_tape(model, &mut tape, x, opts)?;
    Ok(ModelOutput {
        logits: tape.value(out.logits).clone(),
        probes: out
            .probes
            .iter()
            .map(|(&k, &v)| (k, tape.value(v).clone()))
            .collect(),
        batch_stats: out
            .bn_moments
            .into_iter()
            .map(|(layer, m)| BatchStats {
                layer,
                std: m.var.iter().map(|v| v.sqrt()).collect(),
                mean: m.mean,
            })
            .collect(),
    })
}

/// Logits for a large set, evaluated in chunks with stored statistics.
pub(crate) fn logits_chunked(
    model: &ModelGraph,
    images: &Tensor,
    opts: &ForwardOptions<'_>,
    chunk: usize,
) -> Result<Tensor> {
    let n = images.batch();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        parts.push(run_detached(model, &images.slice_batch(start, end), opts)?.logits);
        start = end;
    }
    Tensor::concat_batch(&parts)
}
