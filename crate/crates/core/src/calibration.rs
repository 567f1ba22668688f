//! Activation clipping ranges, batch-norm re-estimation and the labeled
//! clipping sweep used as a reference point.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DfqError, Result};
use crate::nn::{evaluate, BnMode, BnStats};
use crate::quant::{QuantModel, QuantParams, SiteKind};
use crate::tensor::Tensor;

/// Observed range of one activation site over the calibration batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeRecord {
    pub layer: usize,
    pub name: String,
    pub kind: SiteKind,
    pub observed_min: f64,
    pub observed_max: f64,
    pub batches_seen: usize,
}

/// Set every activation quantizer from the peak values the batches produce.
///
/// Activations are collected with quantized weights and unquantized
/// activations. Post-ReLU sites get `[0, max]`, residual sites `[min, max]`.
/// The result does not depend on batch order, and recalibrating with the
/// same batches reproduces the same ranges.
pub fn calibrate_activation_ranges(
    qm: &QuantModel,
    batches: &[Tensor],
) -> Result<(QuantModel, Vec<RangeRecord>)> {
    if batches.is_empty() {
        return Err(DfqError::InvalidArgument(
            "calibration needs at least one batch".into(),
        ));
    }
    let sites = qm.act_sites();
    let mut probe = qm.clone();
    probe.clear_act_quant();
    let mut records: Vec<RangeRecord> = sites
        .iter()
        .map(|&layer| RangeRecord {
            layer,
            name: qm.base().layer_name(layer),
            kind: qm.site_kind(layer).expect("activation site"),
            observed_min: f64::INFINITY,
            observed_max: f64::NEG_INFINITY,
            batches_seen: 0,
        })
        .collect();
    for batch in batches {
        let out = probe.quantized_forward(batch, None, &sites, true)?;
        for r in &mut records {
            let v = &out.probes[&r.layer];
            for &x in v.data() {
                r.observed_min = r.observed_min.min(x);
                r.observed_max = r.observed_max.max(x);
            }
            r.batches_seen += 1;
        }
    }
    let mut calibrated = qm.clone();
    for r in &records {
        let lower = match r.kind {
            SiteKind::PostRelu => 0.0,
            SiteKind::Residual => r.observed_min,
        };
        let (p, widened) = QuantParams::new_widened(lower, r.observed_max, qm.bits())?;
        if widened {
            log::warn!(
                "activation site {} ({}) is constant at {lower}; range widened",
                r.layer,
                r.name
            );
        }
        calibrated.set_act_quant(r.layer, p)?;
    }
    Ok((calibrated, records))
}

/// Upper bound of the fixed activation range used when no calibration runs.
pub const DEFAULT_WIDE_UPPER: f64 = 64.0;

/// Set every activation site to a fixed, data-independent wide range:
/// `[0, upper]` after ReLU and `[-upper, upper]` at residual joins.
///
/// This is the "no activation clipping" baseline of the ablation; it is
/// deliberately not derived from any data.
pub fn default_wide_ranges(qm: &QuantModel, upper: f64) -> Result<QuantModel> {
    if !(upper > 0.0 && upper.is_finite()) {
        return Err(DfqError::InvalidArgument(format!(
            "default activation range must be positive and finite, got {upper}"
        )));
    }
    let mut out = qm.clone();
    for layer in qm.act_sites() {
        let lower = match qm.site_kind(layer).expect("activation site") {
            SiteKind::PostRelu => 0.0,
            SiteKind::Residual => -upper,
        };
        out.set_act_quant(layer, QuantParams::new(lower, upper, qm.bits())?)?;
    }
    Ok(out)
}

/// How re-estimated statistics are combined with the stored ones.
///
/// Written as `replace` or `ema:<momentum>` in configs and reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MomentumPolicy {
    /// Replace the stored statistics outright.
    Replace,
    /// `stored ← (1 − momentum)·stored + momentum·estimate`.
    Ema { momentum: f64 },
}

impl std::fmt::Display for MomentumPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MomentumPolicy::Replace => write!(f, "replace"),
            MomentumPolicy::Ema { momentum } => write!(f, "ema:{momentum}"),
        }
    }
}

impl std::str::FromStr for MomentumPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "replace" => Ok(MomentumPolicy::Replace),
            Some(("ema", m)) => m
                .parse()
                .map(|momentum| MomentumPolicy::Ema { momentum })
                .map_err(|_| format!("bad EMA momentum '{m}'")),
            _ => Err(format!("unknown batch-norm policy '{s}' (replace, ema:<momentum>)")),
        }
    }
}

impl TryFrom<String> for MomentumPolicy {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<MomentumPolicy> for String {
    fn from(p: MomentumPolicy) -> String {
        p.to_string()
    }
}

/// Old and new statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnShift {
    pub layer: usize,
    pub name: String,
    pub old_mean: Vec<f64>,
    pub old_std: Vec<f64>,
    pub new_mean: Vec<f64>,
    pub new_std: Vec<f64>,
    /// `(‖Δμ‖ + ‖Δσ‖) / (‖μ‖ + ‖σ‖)` over channels.
    pub relative_shift: f64,
    /// Mean over channels of `|Δμ| + |Δσ|`.
    pub mean_abs_shift: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

impl BnShift {
    fn new(layer: usize, name: String, old: &BnStats, new: &BnStats) -> Self {
        let (om, os, nm, ns) = (old.mean_f64(), old.std_f64(), new.mean_f64(), new.std_f64());
        let diff = norm(om.iter().zip(&nm).map(|(a, b)| a - b))
            + norm(os.iter().zip(&ns).map(|(a, b)| a - b));
        let base = norm(om.iter().copied()) + norm(os.iter().copied());
        let abs: f64 = (0..om.len())
            .map(|c| (om[c] - nm[c]).abs() + (os[c] - ns[c]).abs())
            .sum();
        BnShift {
            layer,
            name,
            relative_shift: diff / base.max(f64::MIN_POSITIVE),
            mean_abs_shift: abs / om.len() as f64,
            old_mean: om,
            old_std: os,
            new_mean: nm,
            new_std: ns,
        }
    }
}

/// Re-estimate every batch-norm layer's statistics under quantized inference.
///
/// Each batch runs through the quantized model with batch statistics, and
/// the per-layer input means and (biased) variances are averaged with equal
/// weight across batches. The forward pass never reads the stored
/// statistics, so adapting twice on the same batches is a fixed point. The
/// full-precision model the quantized one was built from is not touched.
pub fn adapt_bn_statistics(
    qm: &QuantModel,
    batches: &[Tensor],
    policy: MomentumPolicy,
) -> Result<(QuantModel, Vec<BnShift>)> {
    if batches.is_empty() {
        return Err(DfqError::InvalidArgument(
            "batch-norm adaptation needs at least one batch".into(),
        ));
    }
    if let MomentumPolicy::Ema { momentum } = policy {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(DfqError::InvalidArgument(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
    }
    qm.require_calibrated()?;
    let old = qm.base().bn_stats();
    let layers = qm.base().bn_layers();
    let mut mean_sum: Vec<Vec<f64>> = old.iter().map(|s| vec![0.0; s.channels()]).collect();
    let mut var_sum = mean_sum.clone();
    for batch in batches {
        if batch.batch() < 2 {
            return Err(DfqError::Contract(
                "batch statistics are undefined for a batch of one".into(),
            ));
        }
        let out = qm.forward_mode(batch, BnMode::TrainStats, None, &[], false)?;
        for (k, s) in out.batch_stats.iter().enumerate() {
            for c in 0..s.mean.len() {
                mean_sum[k][c] += s.mean[c];
                var_sum[k][c] += s.std[c] * s.std[c];
            }
        }
    }
    let n = batches.len() as f64;
    let new: Vec<BnStats> = old
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let (a, keep) = match policy {
                MomentumPolicy::Replace => (1.0, 0.0),
                MomentumPolicy::Ema { momentum } => (momentum, 1.0 - momentum),
            };
            let mean = (0..o.channels())
                .map(|c| (keep * o.mean[c] as f64 + a * mean_sum[k][c] / n) as f32)
                .collect();
            let std = (0..o.channels())
                .map(|c| {
                    let old_var = (o.std[c] as f64).powi(2);
                    let v = keep * old_var + a * var_sum[k][c] / n;
                    (v.sqrt() as f32).max(f32::MIN_POSITIVE)
                })
                .collect();
            BnStats {
                mean,
                std,
                eps: o.eps,
            }
        })
        .collect();
    let mut adapted = qm.clone();
    adapted.base_mut().set_bn_stats(&new)?;
    let shifts = layers
        .iter()
        .zip(old.iter().zip(&new))
        .map(|(&l, (o, n))| BnShift::new(l, qm.base().layer_name(l), o, n))
        .collect();
    Ok((adapted, shifts))
}

/// Accuracy curve of one site in a clipping sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSweep {
    pub layer: usize,
    pub name: String,
    pub aac_upper: f64,
    pub chosen_upper: f64,
    /// `(u, top-1 %)` for each evaluated candidate, ascending in `u`.
    pub curve: Vec<(f64, f64)>,
    /// Smallest and largest candidate reaching the best accuracy.
    pub best_bracket: (f64, f64),
    /// Spacing of the uniform grid.
    pub grid_step: f64,
    /// Whether the AAC bound lies within one grid step of the best bracket.
    pub aac_within_one_step: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub aac_accuracy: f64,
    pub sweep_accuracy: f64,
    pub sites: Vec<SiteSweep>,
}

impl SweepReport {
    /// Fraction of sites whose AAC bound is within one grid step of the optimum.
    pub fn aac_agreement(&self) -> f64 {
        let hits = self.sites.iter().filter(|s| s.aac_within_one_step).count();
        hits as f64 / self.sites.len().max(1) as f64
    }
}

/// Uniform candidate grid over `[0, max_upper]` plus any `extra` points, ascending.
pub fn sweep_grid(max_upper: f64, points: usize, extra: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = (0..points)
        .map(|i| max_upper * i as f64 / (points.max(2) - 1) as f64)
        .chain(extra.iter().copied())
        .collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Labeled coordinate-wise search for the best upper clipping bound.
///
/// Sites are visited in network order. Each site's candidates are the
/// `points`-point grid over `[0, scale × AAC bound]` plus the AAC bound
/// itself; the most accurate candidate is committed (ties go to the smaller
/// bound) before moving on. This uses labels and is only a reference for
/// how close the data-free ranges come.
pub fn best_clip_sweep(
    qm: &QuantModel,
    eval: &Dataset,
    points: usize,
    scale: f64,
) -> Result<(QuantModel, SweepReport)> {
    if points < 2 {
        return Err(DfqError::InvalidArgument("sweep grid needs at least 2 points".into()));
    }
    qm.require_calibrated()?;
    let aac_accuracy = evaluate(qm, eval)?;
    let mut current = qm.clone();
    let mut best_acc = aac_accuracy;
    let mut sites = Vec::new();
    for layer in qm.act_sites() {
        let aac = *qm.act_quant(layer).expect("calibrated");
        let top = aac.upper() * scale;
        let step = top / (points - 1) as f64;
        let mut curve = Vec::new();
        for u in sweep_grid(top, points, &[aac.upper()]) {
            if u <= aac.lower() {
                continue;
            }
            let mut trial = current.clone();
            trial.set_act_quant(layer, QuantParams::new(aac.lower(), u, aac.bits())?)?;
            curve.push((u, evaluate(&trial, eval)?));
        }
        if curve.is_empty() {
            return Err(DfqError::InvalidArgument(format!(
                "no sweep candidate above the lower bound at site {layer}"
            )));
        }
        let top_acc = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<f64> = curve.iter().filter(|c| c.1 == top_acc).map(|c| c.0).collect();
        let bracket = (winners[0], *winners.last().unwrap());
        current.set_act_quant(layer, QuantParams::new(aac.lower(), bracket.0, aac.bits())?)?;
        best_acc = top_acc;
        let tol = step * (1.0 + 1e-9);
        sites.push(SiteSweep {
            layer,
            name: qm.base().layer_name(layer),
            aac_upper: aac.upper(),
            chosen_upper: bracket.0,
            aac_within_one_step: aac.upper() >= bracket.0 - tol && aac.upper() <= bracket.1 + tol,
            curve,
            best_bracket: bracket,
            grid_step: step,
        });
    }
    Ok((
        current,
        SweepReport {
            aac_accuracy,
            sweep_accuracy: best_acc,
            sites,
        },
    ))
}

/// Quantizer settings of one activation site, as written to reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRange {
    pub layer: usize,
    pub name: String,
    pub kind: SiteKind,
    pub l: f64,
    pub u: f64,
    pub delta: f64,
    pub bits: u32,
}

pub fn site_ranges(qm: &QuantModel) -> Vec<SiteRange> {
    qm.act_ranges()
        .into_iter()
        .map(|(layer, p)| SiteRange {
            layer,
            name: qm.base().layer_name(layer),
            kind: qm.site_kind(layer).expect("activation site"),
            l: p.lower(),
            u: p.upper(),
            delta: p.delta(),
            bits: p.bits(),
        })
        .collect()
}

/// Machine-readable record of one calibration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sites: Vec<SiteRange>,
    pub observed: Vec<RangeRecord>,
    pub bn: Vec<BnShift>,
}
