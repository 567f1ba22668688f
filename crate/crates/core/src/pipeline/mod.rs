//! The quantization pipeline and the experiments built on it.
//!
//! Steps run in a fixed order: weight quantization with AAC activation
//! clipping (`clip`), batch-norm re-estimation under quantization
//! (`bn-adapt`), and optional distillation fine-tuning (`fine-tune`). None of
//! them takes a dataset; labeled data is only used to score the result.

mod experiments;
mod finetune;

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    adapt_bn_statistics, calibrate_activation_ranges, site_ranges, CalibrationReport,
    MomentumPolicy,
};
use crate::data::Dataset;
use crate::error::{DfqError, Result};
use crate::nn::{evaluate, ModelGraph};
use crate::quant::{quantize_weights, QuantModel};
use crate::synthesis::{
    derive_seed, evaluate_synthesis_quality, generate_aac_batch, generate_batches,
    generate_bns_batch, SynthesisConfig,
};
use crate::tensor::Tensor;

pub use experiments::{
    ablation_run, clip_sweep_run, loss_study_run, median, toy_experiment, AblationRow,
    AblationTable, LossStudyRow, LossStudyTable, SweepRun, ToyLoss, ToyStep,
};
pub use finetune::{fine_tune, FineTuneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    Clip,
    BnAdapt,
    FineTune,
}

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::Clip => "clip",
            Step::BnAdapt => "bn-adapt",
            Step::FineTune => "fine-tune",
        }
    }
}

impl std::str::FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clip" => Ok(Step::Clip),
            "bn-adapt" | "bn" => Ok(Step::BnAdapt),
            "fine-tune" | "ft" => Ok(Step::FineTune),
            other => Err(format!("unknown step '{other}' (clip, bn-adapt, fine-tune)")),
        }
    }
}

/// Parse a comma-separated step list such as `clip,bn-adapt`.
pub fn parse_steps(s: &str) -> std::result::Result<BTreeSet<Step>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty() && *p != "none")
        .map(str::parse)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bits: u32,
    pub steps: BTreeSet<Step>,
    pub aac: SynthesisConfig,
    pub bns: SynthesisConfig,
    pub bn_policy: MomentumPolicy,
    pub fine_tune: FineTuneConfig,
    /// Seeds every synthesis call; the `seed` fields of the nested configs
    /// are overwritten with values derived from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bits: 4,
            steps: [Step::Clip, Step::BnAdapt].into(),
            aac: SynthesisConfig::aac(),
            bns: SynthesisConfig::bns(),
            bn_policy: MomentumPolicy::Replace,
            fine_tune: FineTuneConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (step, needs) in [(Step::BnAdapt, Step::Clip), (Step::FineTune, Step::Clip)] {
            if self.steps.contains(&step) && !self.steps.contains(&needs) {
                return Err(DfqError::Contract(format!(
                    "step '{}' requires step '{}' before it",
                    step.name(),
                    needs.name()
                )));
            }
        }
        self.aac.validate()?;
        self.bns.validate()?;
        self.fine_tune.validate()
    }

    /// The configuration with every nested seed derived from `seed`.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.aac.seed = derive_seed(self.seed, 1);
        c.bns.seed = derive_seed(self.seed, 2);
        c.fine_tune.aac.seed = derive_seed(self.seed, 3);
        c.fine_tune.bns.seed = derive_seed(self.seed, 4);
        c
    }
}

/// Top-1 accuracy after one pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAccuracy {
    pub stage: String,
    pub accuracy: f64,
}

/// Everything about a run that is fully determined by its configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub config: PipelineConfig,
    pub fp_accuracy: Option<f64>,
    /// One entry per executed stage, in order.
    pub accuracies: Vec<StageAccuracy>,
    /// Teacher cross-entropy on the AAC batches.
    pub aac_quality: Option<f64>,
    pub calibration: CalibrationReport,
}

/// Wall-clock seconds per stage. Evaluation is excluded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub weights: f64,
    pub aac_synthesis: f64,
    pub clip: f64,
    pub bns_synthesis: f64,
    pub bn_adapt: f64,
    pub fine_tune: f64,
    /// Weight quantization, clipping and batch-norm adaptation.
    pub two_step: f64,
    /// `two_step` plus fine-tuning.
    pub three_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub results: RunResults,
    pub timing: Timing,
    /// Seconds since the Unix epoch when the run finished.
    pub finished_at: u64,
}

impl RunReport {
    pub fn accuracy(&self, stage: &str) -> Option<f64> {
        self.results
            .accuracies
            .iter()
            .find(|a| a.stage == stage)
            .map(|a| a.accuracy)
    }

    /// Plain-text table of stage accuracies and times.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}-bit run, seed {}\n",
            self.results.config.bits, self.results.config.seed
        );
        if let Some(fp) = self.results.fp_accuracy {
            s += &format!("  {:<12} {:>7.2}%\n", "full-prec", fp);
        }
        for a in &self.results.accuracies {
            s += &format!("  {:<12} {:>7.2}%\n", a.stage, a.accuracy);
        }
        s += &format!(
            "  two-step {:.2}s, three-step {:.2}s\n",
            self.timing.two_step, self.timing.three_step
        );
        s
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let r = f();
    *slot += t.elapsed().as_secs_f64();
    r
}

fn images_of(batches: Vec<crate::synthesis::SynthBatch>) -> (Vec<Tensor>, Vec<Vec<usize>>) {
    batches.into_iter().map(|b| (b.images, b.labels)).unzip()
}

/// Run the enabled steps on `fp`, scoring each stage on `eval` when given.
///
/// An empty step set leaves the activation quantizers unset, so evaluating
/// the result is rejected.
pub fn run_pipeline(
    fp: &ModelGraph,
    cfg: &PipelineConfig,
    eval: Option<&Dataset>,
) -> Result<(QuantModel, RunReport)> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut timing = Timing::default();
    let mut accuracies = Vec::new();
    let mut calibration = CalibrationReport::default();
    let mut aac_quality = None;
    let fp_accuracy = eval.map(|d| evaluate(fp, d)).transpose()?;
    let score = |stage: &str, qm: &QuantModel, acc: &mut Vec<StageAccuracy>| -> Result<()> {
        if let Some(d) = eval {
            acc.push(StageAccuracy {
                stage: stage.into(),
                accuracy: evaluate(qm, d)?,
            });
        }
        Ok(())
    };

    let mut qm = timed(&mut timing.weights, || quantize_weights(fp, cfg.bits))?;
    if cfg.steps.is_empty() {
        score("weights", &qm, &mut accuracies)?;
    }
    let mut bns_images = Vec::new();
    if cfg.steps.contains(&Step::Clip) {
        let aac = timed(&mut timing.aac_synthesis, || {
            generate_batches(fp, &cfg.aac, generate_aac_batch)
        })?;
        let (images, labels) = images_of(aac);
        let q: Vec<f64> = images
            .iter()
            .zip(&labels)
            .map(|(x, y)| evaluate_synthesis_quality(fp, x, y))
            .collect::<Result<_>>()?;
        aac_quality = Some(q.iter().sum::<f64>() / q.len() as f64);
        let (calibrated, observed) =
            timed(&mut timing.clip, || calibrate_activation_ranges(&qm, &images))?;
        qm = calibrated;
        calibration.observed = observed;
        score("clip", &qm, &mut accuracies)?;
    }
    if cfg.steps.contains(&Step::BnAdapt) || cfg.steps.contains(&Step::FineTune) {
        let bns = timed(&mut timing.bns_synthesis, || {
            generate_batches(fp, &cfg.bns, generate_bns_batch)
        })?;
        bns_images = images_of(bns).0;
    }
    if cfg.steps.contains(&Step::BnAdapt) {
        let (adapted, shifts) = timed(&mut timing.bn_adapt, || {
            adapt_bn_statistics(&qm, &bns_images, cfg.bn_policy)
        })?;
        qm = adapted;
        calibration.bn = shifts;
        score("bn-adapt", &qm, &mut accuracies)?;
    }
    timing.two_step = timing.weights
        + timing.aac_synthesis
        + timing.clip
        + timing.bns_synthesis
        + timing.bn_adapt;
    if cfg.steps.contains(&Step::FineTune) {
        let seed = derive_seed(cfg.seed, 5);
        qm = timed(&mut timing.fine_tune, || {
            fine_tune(&qm, fp, &cfg.fine_tune, seed, &bns_images, cfg.bn_policy)
        })?;
        score("fine-tune", &qm, &mut accuracies)?;
    }
    timing.three_step = timing.two_step + timing.fine_tune;
    calibration.sites = site_ranges(&qm);
    Ok((
        qm,
        RunReport {
            results: RunResults {
                config: cfg,
                fp_accuracy,
                accuracies,
                aac_quality,
                calibration,
            },
            timing,
            finished_at: unix_now(),
        },
    ))
}
