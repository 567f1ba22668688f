//! Experiment drivers: the identity-model toy, the step ablation, the loss
//! comparison and the labeled clipping sweep.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::calibration::{
    best_clip_sweep, calibrate_activation_ranges, default_wide_ranges, SweepReport,
    DEFAULT_WIDE_UPPER,
};
use crate::data::Dataset;
use crate::error::{DfqError, Result};
use crate::nn::loss::{abs_loss, ce_loss};
use crate::nn::{evaluate, ModelGraph};
use crate::pipeline::{run_pipeline, PipelineConfig, RunReport, Step};
use crate::quant::{quantize_weights, QuantModel};
use crate::synthesis::{
    derive_seed, evaluate_synthesis_quality, generate_aac_batch, generate_batches, LossKind,
    SynthesisConfig,
};
use crate::tensor::Tensor;

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyLoss {
    Ce,
    Abs,
}

impl std::str::FromStr for ToyLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce" => Ok(ToyLoss::Ce),
            "abs" => Ok(ToyLoss::Abs),
            other => Err(format!("unknown toy loss '{other}' (ce, abs)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyStep {
    pub iteration: usize,
    pub p_target: f64,
    pub loss: f64,
    /// Derivative of the loss with respect to the target logit.
    pub grad_target: f64,
}

/// Gradient descent on the input of the identity model `M(x) = x`.
///
/// `x ∈ Rⁿ` starts standard-gaussian; the trajectory has one entry per
/// iterate `0..=iterations` (the gradient of the last entry is evaluated but
/// not applied).
pub fn toy_experiment(
    loss: ToyLoss,
    n: usize,
    target: usize,
    iterations: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<ToyStep>> {
    if n < 2 || target >= n {
        return Err(DfqError::InvalidArgument(format!(
            "toy experiment needs n ≥ 2 and target < n (n={n}, target={target})"
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&[1, n], &mut rng);
    let mut out = Vec::with_capacity(iterations + 1);
    for it in 0..=iterations {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let l = match loss {
            ToyLoss::Ce => ce_loss(&mut tape, v, &[target])?,
            ToyLoss::Abs => abs_loss(&mut tape, v, &[target])?,
        };
        let p = crate::autograd::kernels::softmax_rows(n, tape.value(v).data());
        let value = tape.value(l).item();
        let g = tape.backward(l)?.take(v).expect("input gradient");
        out.push(ToyStep {
            iteration: it,
            p_target: p[target],
            loss: value,
            grad_target: g.data()[target],
        });
        if it < iterations {
            for (xi, gi) in x.data_mut().iter_mut().zip(g.data()) {
                *xi -= lr * gi;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub accuracies: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl AblationRow {
    fn new(config: &str, accuracies: Vec<f64>) -> Self {
        AblationRow {
            config: config.into(),
            median: median(&accuracies),
            min: accuracies.iter().cloned().fold(f64::INFINITY, f64::min),
            max: accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            accuracies,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub bits: u32,
    pub seeds: Vec<u64>,
    pub fp_accuracy: f64,
    /// `none`, `clip`, `clip+bn`, `clip+bn+ft`, in that order.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, config: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}-bit ablation over {} seed(s); full precision {:.2}%\n",
            self.bits,
            self.seeds.len(),
            self.fp_accuracy
        );
        for r in &self.rows {
            s += &format!(
                "  {:<12} median {:>6.2}%  [{:.2}, {:.2}]\n",
                r.config, r.median, r.min, r.max
            );
        }
        s
    }
}

/// Accuracy of each pipeline prefix at `base.bits`, per seed.
///
/// `none` quantizes weights and leaves every activation site at the fixed
/// wide range of [`default_wide_ranges`], so it is the same for all seeds.
/// The other rows are the stages of one full three-step run per seed. Also
/// returns the full runs' reports.
pub fn ablation_run(
    fp: &ModelGraph,
    eval: &Dataset,
    base: &PipelineConfig,
    seeds: &[u64],
) -> Result<(AblationTable, Vec<RunReport>)> {
    if seeds.is_empty() {
        return Err(DfqError::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut reports = Vec::new();
    let mut fp_accuracy = 0.0;
    let none = default_wide_ranges(&quantize_weights(fp, base.bits)?, DEFAULT_WIDE_UPPER)?;
    let none_accuracy = evaluate(&none, eval)?;
    for &seed in seeds {
        cols[0].push(none_accuracy);

        let mut full = base.clone();
        full.seed = seed;
        full.steps = [Step::Clip, Step::BnAdapt, Step::FineTune].into();
        let (_, r) = run_pipeline(fp, &full, Some(eval))?;
        for (k, stage) in ["clip", "bn-adapt", "fine-tune"].into_iter().enumerate() {
            cols[k + 1].push(r.accuracy(stage).expect("scored"));
        }
        fp_accuracy = r.results.fp_accuracy.expect("scored");
        reports.push(r);
    }
    let names = ["none", "clip", "clip+bn", "clip+bn+ft"];
    let rows = names
        .iter()
        .zip(cols)
        .map(|(n, c)| AblationRow::new(n, c))
        .collect();
    Ok((
        AblationTable {
            bits: base.bits,
            seeds: seeds.to_vec(),
            fp_accuracy,
            rows,
        },
        reports,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStudyRow {
    pub loss: LossKind,
    /// Teacher cross-entropy on the generated batches, per seed.
    pub synthesis_ce: Vec<f64>,
    /// Clip-only quantized accuracy, per seed.
    pub accuracy: Vec<f64>,
    pub median_ce: f64,
    pub median_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStudyTable {
    pub bits: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<LossStudyRow>,
}

impl LossStudyTable {
    pub fn row(&self, loss: LossKind) -> Option<&LossStudyRow> {
        self.rows.iter().find(|r| r.loss == loss)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{}-bit loss study over {} seed(s)\n", self.bits, self.seeds.len());
        for r in &self.rows {
            s += &format!(
                "  {:<8} CE {:>10.4}  acc {:>6.2}%\n",
                r.loss.name(),
                r.median_ce,
                r.median_accuracy
            );
        }
        s
    }
}

/// The loss kinds compared in the loss study, in report order.
pub const STUDY_LOSSES: [LossKind; 5] = [
    LossKind::AbsBns,
    LossKind::Ce,
    LossKind::Mae,
    LossKind::Mse,
    LossKind::Abs,
];

/// Generate calibration batches under each loss, calibrate clip-only at
/// `bits`, and report the teacher cross-entropy and quantized accuracy.
pub fn loss_study_run(
    fp: &ModelGraph,
    eval: &Dataset,
    bits: u32,
    aac: &SynthesisConfig,
    seeds: &[u64],
) -> Result<LossStudyTable> {
    if seeds.is_empty() {
        return Err(DfqError::InvalidArgument("loss study needs at least one seed".into()));
    }
    let weights = quantize_weights(fp, bits)?;
    let mut rows = Vec::new();
    for loss in STUDY_LOSSES {
        let (mut ces, mut accs) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let cfg = SynthesisConfig {
                loss_kind: loss,
                seed: derive_seed(seed, 1),
                ..aac.clone()
            };
            let batches = generate_batches(fp, &cfg, generate_aac_batch)?;
            let ce: Vec<f64> = batches
                .iter()
                .map(|b| evaluate_synthesis_quality(fp, &b.images, &b.labels))
                .collect::<Result<_>>()?;
            ces.push(ce.iter().sum::<f64>() / ce.len() as f64);
            let images: Vec<Tensor> = batches.into_iter().map(|b| b.images).collect();
            let (qm, _) = calibrate_activation_ranges(&weights, &images)?;
            accs.push(evaluate(&qm, eval)?);
        }
        rows.push(LossStudyRow {
            loss,
            median_ce: median(&ces),
            median_accuracy: median(&accs),
            synthesis_ce: ces,
            accuracy: accs,
        });
    }
    Ok(LossStudyTable {
        bits,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub bits: u32,
    pub seed: u64,
    pub report: SweepReport,
}

/// Clip-only calibration followed by the labeled per-site sweep on `eval`.
pub fn clip_sweep_run(
    fp: &ModelGraph,
    cfg: &PipelineConfig,
    eval: &Dataset,
    points: usize,
    scale: f64,
) -> Result<(QuantModel, SweepRun)> {
    let mut clip = cfg.clone();
    clip.steps = [Step::Clip].into();
    let (qm, _) = run_pipeline(fp, &clip, None)?;
    let (swept, report) = best_clip_sweep(&qm, eval, points, scale)?;
    Ok((
        swept,
        SweepRun {
            bits: cfg.bits,
            seed: cfg.seed,
            report,
        },
    ))
}
