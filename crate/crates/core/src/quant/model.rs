use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DfqError, Result};
use crate::nn::{
    logits_chunked, run_detached, BnMode, BnStats, Classifier, Layer, ModelGraph, ModelOutput,
    ForwardOptions, QuantHooks, EVAL_CHUNK,
};
use crate::quant::params::QuantParams;
use crate::tensor::Tensor;

/// Where an activation quantizer sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    /// After a ReLU: lower bound fixed at zero.
    PostRelu,
    /// After a residual add: signed range from the observed minimum.
    Residual,
}

/// A model with simulated (fake) quantization of every conv/linear weight and
/// of the activations after every ReLU and residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    base: ModelGraph,
    bits: u32,
    weight_quant: Vec<Option<QuantParams>>,
    site_kinds: Vec<Option<SiteKind>>,
    site_mask: Vec<bool>,
    act_quant: Vec<Option<QuantParams>>,
    enabled: bool,
}

fn weight_params(layer: &Layer, bits: u32) -> Result<Option<QuantParams>> {
    let Some(w) = layer.quantizable_weight() else {
        return Ok(None);
    };
    let (lo, hi) = w.min_max();
    let (p, widened) = QuantParams::new_widened(lo as f64, hi as f64, bits)?;
    if widened {
        log::warn!("constant weight tensor ({lo}); quantization range widened");
    }
    Ok(Some(p))
}

/// Attach `bits`-bit per-tensor weight quantizers (range = weight min/max) and
/// unset activation quantizers after every ReLU and residual add.
pub fn quantize_weights(model: &ModelGraph, bits: u32) -> Result<QuantModel> {
    model.validate()?;
    let weight_quant = model
        .layers
        .iter()
        .map(|l| weight_params(l, bits))
        .collect::<Result<Vec<_>>>()?;
    let site_kinds: Vec<Option<SiteKind>> = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Relu => Some(SiteKind::PostRelu),
            Layer::ResidualAdd { .. } => Some(SiteKind::Residual),
            _ => None,
        })
        .collect();
    Ok(QuantModel {
        base: model.clone(),
        bits,
        weight_quant,
        site_mask: site_kinds.iter().map(Option::is_some).collect(),
        site_kinds,
        act_quant: vec![None; model.layers.len()],
        enabled: true,
    })
}

impl QuantModel {
    pub(crate) fn from_parts(
        base: ModelGraph,
        bits: u32,
        weight_quant: Vec<Option<QuantParams>>,
        act_quant: Vec<Option<QuantParams>>,
        enabled: bool,
    ) -> Result<Self> {
        let mut qm = quantize_weights(&base, bits)?;
        if weight_quant.len() != qm.weight_quant.len() || act_quant.len() != qm.act_quant.len() {
            return Err(DfqError::HeaderMismatch("quant table does not match layers".into()));
        }
        for (i, (w, a)) in weight_quant.iter().zip(&act_quant).enumerate() {
            if w.is_some() != qm.weight_quant[i].is_some() {
                return Err(DfqError::HeaderMismatch(format!(
                    "layer {i}: weight quantizer presence disagrees with layer kind"
                )));
            }
            if a.is_some() && qm.site_kinds[i].is_none() {
                return Err(DfqError::HeaderMismatch(format!(
                    "layer {i} is not an activation site"
                )));
            }
        }
        qm.weight_quant = weight_quant;
        qm.act_quant = act_quant;
        qm.enabled = enabled;
        Ok(qm)
    }

    pub fn base(&self) -> &ModelGraph {
        &self.base
    }

    pub(crate) fn base_mut(&mut self) -> &mut ModelGraph {
        &mut self.base
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn weight_quant(&self, layer: usize) -> Option<&QuantParams> {
        self.weight_quant[layer].as_ref()
    }

    pub fn act_quant(&self, layer: usize) -> Option<&QuantParams> {
        self.act_quant[layer].as_ref()
    }

    /// Layer indices followed by an activation quantizer, in network order.
    pub fn act_sites(&self) -> Vec<usize> {
        (0..self.site_kinds.len())
            .filter(|&i| self.site_kinds[i].is_some())
            .collect()
    }

    pub fn site_kind(&self, layer: usize) -> Option<SiteKind> {
        self.site_kinds[layer]
    }

    pub fn is_calibrated(&self) -> bool {
        self.act_sites().iter().all(|&i| self.act_quant[i].is_some())
    }

    /// Whether quantizers are applied at all. A disabled model behaves exactly
    /// like its base model and serves as a no-quantization control.
    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// A copy with every quantizer bypassed (ranges are kept).
    pub fn with_quantization_disabled(&self) -> QuantModel {
        QuantModel {
            enabled: false,
            ..self.clone()
        }
    }

    pub fn set_act_quant(&mut self, layer: usize, p: QuantParams) -> Result<()> {
        if self.site_kinds.get(layer).copied().flatten().is_none() {
            return Err(DfqError::InvalidArgument(format!(
                "layer {layer} is not an activation quantization site"
            )));
        }
        self.act_quant[layer] = Some(p);
        Ok(())
    }

    pub(crate) fn clear_act_quant(&mut self) {
        self.act_quant.iter_mut().for_each(|a| *a = None);
    }

    pub(crate) fn hooks(&self, allow_unset: bool) -> Option<QuantHooks<'_>> {
        self.enabled.then(|| QuantHooks {
            weight: &self.weight_quant,
            sites: &self.site_mask,
            act: &self.act_quant,
            allow_unset,
        })
    }

    /// Forward pass with fake quantization at every weight and activation site.
    ///
    /// With `calibration` set, unset activation sites pass values through
    /// unquantized; otherwise reaching one is an error. Probe values are
    /// layer outputs before the activation quantizer.
    pub fn quantized_forward(
        &self,
        batch: &Tensor,
        bn_override: Option<&[BnStats]>,
        probes: &[usize],
        calibration: bool,
    ) -> Result<ModelOutput> {
        self.forward_mode(batch, BnMode::EvalStats, bn_override, probes, calibration)
    }

    pub(crate) fn forward_mode(
        &self,
        batch: &Tensor,
        mode: BnMode,
        bn_override: Option<&[BnStats]>,
        probes: &[usize],
        calibration: bool,
    ) -> Result<ModelOutput> {
        if !calibration {
            self.require_calibrated()?;
        }
        let opts = ForwardOptions {
            probes,
            quant: self.hooks(calibration),
            bn_override,
            ..ForwardOptions::new(mode)
        };
        run_detached(&self.base, batch, &opts)
    }

    pub fn require_calibrated(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        match self.act_sites().into_iter().find(|&i| self.act_quant[i].is_none()) {
            Some(site) => Err(DfqError::Uncalibrated { site }),
            None => Ok(()),
        }
    }

    /// Activation ranges as `(layer, params)` for every calibrated site.
    pub fn act_ranges(&self) -> BTreeMap<usize, QuantParams> {
        self.act_quant
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (i, p)))
            .collect()
    }
}

impl Classifier for QuantModel {
    fn class_count(&self) -> usize {
        self.base.class_count
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.require_calibrated()?;
        let opts = ForwardOptions {
            quant: self.hooks(false),
            ..ForwardOptions::new(BnMode::EvalStats)
        };
        logits_chunked(&self.base, images, &opts, EVAL_CHUNK)
    }
}
