use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use dfq_core::data::{make_desk_dataset, Dataset, DeskDatasetConfig};
use dfq_core::nn::{evaluate, load_model, save_model, train_fp, zoo, ModelGraph, TrainConfig};
use dfq_core::pipeline::{
    ablation_run, clip_sweep_run, loss_study_run, parse_steps, run_pipeline, toy_experiment,
    PipelineConfig, Step, ToyLoss,
};
use dfq_core::quant::{load_any_model, save_quant_model, AnyModel};
use dfq_core::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::settings::{resolve, Outputs};
use crate::{Common, UsageError};

fn load_fp(path: &PathBuf) -> Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(path: &PathBuf) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| UsageError(format!("bad seed list '{s}': {e}")))?;
    if seeds.is_empty() {
        bail!(UsageError("seed list is empty".into()));
    }
    Ok(seeds)
}

/// `--seed s` turns a default seed list of length n into `s, s+1, …, s+n−1`.
fn shift_seeds(seeds: &mut [u64], base: Option<u64>) {
    if let Some(s) = base {
        for (i, v) in seeds.iter_mut().enumerate() {
            *v = s + i as u64;
        }
    }
}

#[derive(Args, Debug)]
pub struct MakeDataset {
    /// Output file [default: <report-dir>/desk.dfqd].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
}

impl MakeDataset {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let mut cfg: DeskDatasetConfig = resolve(&DeskDatasetConfig::default(), common)?;
        if let Some(c) = self.classes {
            cfg.classes = c;
        }
        if let Some(n) = self.samples_per_class {
            cfg.samples_per_class = n;
        }
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let data = make_desk_dataset(&cfg)?;
        let path = self.out.clone().unwrap_or_else(|| out.path("desk.dfqd"));
        out.write(&path, &data.encode())?;
        let shape = data.sample_shape();
        println!("{} samples, {} classes, shape {:?} → {}", data.len(), data.class_count, shape, path.display());
        out.report(
            "make-dataset",
            &cfg,
            &json!({ "path": path, "samples": data.len(), "classes": data.class_count, "shape": shape }),
            json!({}),
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub arch: String,
    /// Samples held out from the end of the dataset for validation.
    pub val_size: usize,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            arch: "tiny-block-net".into(),
            val_size: 1000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainFp {
    /// Dataset file from `make-dataset`.
    #[arg(long)]
    data: PathBuf,
    /// Output model [default: <report-dir>/fp.dfqm].
    #[arg(long)]
    out: Option<PathBuf>,
    /// tiny-block-net or mini-resnet.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl TrainFp {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let mut cfg: TrainSettings = resolve(&TrainSettings::default(), common)?;
        if let Some(a) = &self.arch {
            cfg.arch = a.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = common.seed {
            cfg.train.seed = s;
        }
        let arch = cfg.arch.parse().map_err(UsageError)?;
        let path = self.out.clone().unwrap_or_else(|| out.path("fp.dfqm"));
        if path.exists() && !common.overwrite {
            return Err(dfq_core::DfqError::WouldOverwrite(path).into());
        }
        let data = load_data(&self.data)?;
        let (train, val) = data.split_tail(cfg.val_size)?;
        let model = zoo::build(arch, data.sample_shape(), data.class_count, cfg.train.seed)?;
        let started = std::time::Instant::now();
        let (model, report) = train_fp(model, &train, (!val.is_empty()).then_some(&val), &cfg.train)?;
        let seconds = started.elapsed().as_secs_f64();
        save_model(&model, &path, common.overwrite)?;
        match report.val_accuracy {
            Some(a) => println!("validation accuracy {a:.2}% → {}", path.display()),
            None => println!("trained → {}", path.display()),
        }
        out.report("train-fp", &cfg, &report, json!({ "train": seconds }))?;
        Ok(())
    }
}

/// Flags that override pipeline settings.
#[derive(Args, Debug)]
pub struct PipelineFlags {
    /// Bit-width for weights and activations (2–8).
    #[arg(long)]
    bits: Option<u32>,
    /// Comma-separated steps: clip, bn-adapt, fine-tune (or none).
    #[arg(long)]
    steps: Option<String>,
}

impl PipelineFlags {
    fn apply(&self, cfg: &mut PipelineConfig, common: &Common) -> Result<()> {
        if let Some(b) = self.bits {
            cfg.bits = b;
        }
        if let Some(s) = &self.steps {
            cfg.steps = parse_steps(s).map_err(UsageError)?;
        }
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Quantize {
    /// Full-precision model file.
    #[arg(long)]
    model: PathBuf,
    /// Labeled data for scoring each stage (never used for calibration).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output quantized model [default: <report-dir>/quant.dfqm].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

impl Quantize {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let mut cfg: PipelineConfig = resolve(&PipelineConfig::default(), common)?;
        self.pipeline.apply(&mut cfg, common)?;
        let path = self.out.clone().unwrap_or_else(|| out.path("quant.dfqm"));
        if path.exists() && !common.overwrite {
            return Err(dfq_core::DfqError::WouldOverwrite(path).into());
        }
        let fp = load_fp(&self.model)?;
        let eval = self.data.as_ref().map(load_data).transpose()?;
        let (qm, report) = run_pipeline(&fp, &cfg, eval.as_ref())?;
        save_quant_model(&qm, &path, common.overwrite)?;
        print!("{}", report.summary());
        if !qm.is_calibrated() {
            log::warn!("no calibration step ran; the saved model cannot be evaluated");
        }
        out.report(
            "quantize",
            &report.results.config,
            &report.results,
            serde_json::to_value(report.timing)?,
        )?;
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Evaluate {
    /// Full-precision or quantized model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

impl Evaluate {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let model = load_any_model(&self.model)
            .with_context(|| format!("loading model {}", self.model.display()))?;
        let data = load_data(&self.data)?;
        let (kind, accuracy) = match &model {
            AnyModel::FullPrecision(m) => ("full-precision", evaluate(m, &data)?),
            AnyModel::Quantized(q) => ("quantized", evaluate(q, &data)?),
        };
        println!("{kind} model: top-1 {accuracy:.2}% on {} samples", data.len());
        out.report(
            "evaluate",
            &json!({ "model": self.model, "data": self.data }),
            &json!({ "kind": kind, "accuracy": accuracy, "samples": data.len() }),
            json!({}),
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub pipeline: PipelineConfig,
}

#[derive(Args, Debug)]
pub struct Ablation {
    #[arg(long)]
    model: PathBuf,
    /// Labeled evaluation data.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated seeds [default: 0,1,2,3,4].
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    bits: Option<u32>,
}

impl Ablation {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let defaults = AblationSettings {
            seeds: vec![0, 1, 2, 3, 4],
            pipeline: PipelineConfig::default(),
        };
        let mut cfg: AblationSettings = resolve(&defaults, common)?;
        shift_seeds(&mut cfg.seeds, common.seed);
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(b) = self.bits {
            cfg.pipeline.bits = b;
        }
        let fp = load_fp(&self.model)?;
        let eval = load_data(&self.data)?;
        let (table, reports) = ablation_run(&fp, &eval, &cfg.pipeline, &cfg.seeds)?;
        print!("{}", table.summary());
        let runs: Vec<_> = reports.iter().map(|r| &r.results).collect();
        let timing: Vec<_> = reports.iter().map(|r| &r.timing).collect();
        out.report(
            "ablation",
            &cfg,
            &json!({ "table": table, "runs": runs }),
            json!({ "runs": timing }),
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStudySettings {
    pub bits: u32,
    pub seeds: Vec<u64>,
    pub aac: SynthesisConfig,
}

#[derive(Args, Debug)]
pub struct LossStudy {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated seeds [default: 0,1,2,3,4].
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    bits: Option<u32>,
}

impl LossStudy {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let defaults = LossStudySettings {
            bits: 4,
            seeds: vec![0, 1, 2, 3, 4],
            aac: SynthesisConfig::aac(),
        };
        let mut cfg: LossStudySettings = resolve(&defaults, common)?;
        shift_seeds(&mut cfg.seeds, common.seed);
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(b) = self.bits {
            cfg.bits = b;
        }
        let fp = load_fp(&self.model)?;
        let eval = load_data(&self.data)?;
        let table = loss_study_run(&fp, &eval, cfg.bits, &cfg.aac, &cfg.seeds)?;
        print!("{}", table.summary());
        out.report("loss-study", &cfg, &table, json!({}))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySettings {
    pub loss: ToyLoss,
    /// Number of logits.
    pub n: usize,
    pub target: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct Toy {
    /// ce or abs.
    #[arg(long)]
    loss: Option<ToyLoss>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Trajectory file [default: <report-dir>/toy-<loss>.txt].
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Toy {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let defaults = ToySettings {
            loss: ToyLoss::Abs,
            n: 10,
            target: 0,
            iterations: 300,
            lr: 0.1,
            seed: 0,
        };
        let mut cfg: ToySettings = resolve(&defaults, common)?;
        if let Some(l) = self.loss {
            cfg.loss = l;
        }
        if let Some(i) = self.iters {
            cfg.iterations = i;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let steps = toy_experiment(cfg.loss, cfg.n, cfg.target, cfg.iterations, cfg.lr, cfg.seed)?;
        let name = match cfg.loss {
            ToyLoss::Abs => "abs",
            ToyLoss::Ce => "ce",
        };
        let mut text = String::from("# iteration p_target loss\n");
        for s in &steps {
            let _ = writeln!(text, "{} {:.12e} {:.12e}", s.iteration, s.p_target, s.loss);
        }
        let path = self.out.clone().unwrap_or_else(|| out.path(&format!("toy-{name}.txt")));
        out.write(&path, text.as_bytes())?;
        let last = steps.last().expect("at least the initial iterate");
        println!("{name}: p_target {:.6} after {} iterations → {}", last.p_target, last.iteration, path.display());
        out.report(
            "toy",
            &cfg,
            &json!({ "final_p_target": last.p_target, "final_loss": last.loss, "trajectory": path }),
            json!({}),
        )?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    /// Grid points per site, including 0.
    pub points: usize,
    /// The grid spans `[0, scale × AAC peak]`.
    pub scale: f64,
    pub pipeline: PipelineConfig,
}

#[derive(Args, Debug)]
pub struct Sweep {
    #[arg(long)]
    model: PathBuf,
    /// Labeled evaluation data for the sweep.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    points: Option<usize>,
    /// Optional output for the swept quantized model.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Sweep {
    pub fn run(&self, common: &Common) -> Result<()> {
        let out = Outputs::new(common);
        let defaults = SweepSettings {
            points: 101,
            scale: 1.5,
            pipeline: PipelineConfig {
                steps: [Step::Clip].into(),
                ..PipelineConfig::default()
            },
        };
        let mut cfg: SweepSettings = resolve(&defaults, common)?;
        if let Some(b) = self.bits {
            cfg.pipeline.bits = b;
        }
        if let Some(p) = self.points {
            cfg.points = p;
        }
        if let Some(s) = common.seed {
            cfg.pipeline.seed = s;
        }
        let fp = load_fp(&self.model)?;
        let eval = load_data(&self.data)?;
        let (swept, run) = clip_sweep_run(&fp, &cfg.pipeline, &eval, cfg.points, cfg.scale)?;
        if let Some(path) = &self.out {
            save_quant_model(&swept, path, common.overwrite)?;
        }
        let r = &run.report;
        println!(
            "AAC {:.2}%, sweep {:.2}%, AAC within one grid step at {:.0}% of {} sites",
            r.aac_accuracy,
            r.sweep_accuracy,
            100.0 * r.aac_agreement(),
            r.sites.len()
        );
        out.report("sweep", &cfg, &run, json!({}))?;
        Ok(())
    }
}
