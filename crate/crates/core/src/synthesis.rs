//! Calibration data synthesized from the full-precision model alone.
//!
//! Inputs start as standard-gaussian noise and are optimized by gradient
//! descent on the input, with the model frozen:
//!
//! * AAC batches maximize the target-class logit (the ABS loss), so the
//!   network produces the confident, peaked activations it shows on real data.
//! * BNS batches match the per-channel batch statistics seen at each
//!   batch-norm input to the stored running statistics.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::binio::write_file;
use crate::data::Dataset;
use crate::error::{DfqError, Result};
use crate::nn::loss::{abs_loss, bns_loss, ce_loss, ce_value, mae_loss, mse_loss};
use crate::nn::{forward_on_tape, logits_chunked, BnMode, ForwardOptions, ModelGraph, EVAL_CHUNK};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Abs,
    Ce,
    Mae,
    Mse,
    #[serde(rename = "abs+bns")]
    AbsBns,
    Bns,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Abs,
        LossKind::Ce,
        LossKind::Mae,
        LossKind::Mse,
        LossKind::AbsBns,
        LossKind::Bns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Abs => "abs",
            LossKind::Ce => "ce",
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
            LossKind::AbsBns => "abs+bns",
            LossKind::Bns => "bns",
        }
    }

    fn uses_bns(self) -> bool {
        matches!(self, LossKind::AbsBns | LossKind::Bns)
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown loss '{s}' (abs, ce, mae, mse, abs+bns, bns)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPolicy {
    /// Sample `i` gets class `i mod classes`.
    RoundRobin,
    UniformRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    StandardGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Fixed-step gradient descent.
    Gd,
    /// Adam with β = (0.9, 0.999).
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub batch_size: usize,
    /// Independent batches per generation call.
    pub batches: usize,
    pub iterations: usize,
    pub lr: f64,
    pub loss_kind: LossKind,
    pub label_policy: LabelPolicy,
    pub init: Init,
    pub optimizer: Optimizer,
    /// A BNS run warns when its final loss exceeds this fraction of the initial loss.
    pub bns_warn_ratio: f64,
    pub seed: u64,
}

impl SynthesisConfig {
    /// Activation-maximizing defaults: ABS loss, lr 0.2, 200 iterations.
    pub fn aac() -> Self {
        SynthesisConfig {
            batch_size: 32,
            batches: 1,
            iterations: 200,
            lr: 0.2,
            loss_kind: LossKind::Abs,
            label_policy: LabelPolicy::RoundRobin,
            init: Init::StandardGaussian,
            optimizer: Optimizer::Gd,
            bns_warn_ratio: 0.1,
            seed: 0,
        }
    }

    /// Statistics-matching defaults: BNS loss, Adam at lr 0.1, 500 iterations.
    ///
    /// Plain gradient descent leaves the batch statistics visibly off the
    /// stored ones after 500 steps, which would make batch-norm adaptation
    /// chase synthesis error instead of quantization error.
    pub fn bns() -> Self {
        SynthesisConfig {
            iterations: 500,
            lr: 0.1,
            optimizer: Optimizer::Adam,
            loss_kind: LossKind::Bns,
            ..SynthesisConfig::aac()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batches == 0 {
            return Err(DfqError::InvalidArgument(
                "synthesis batch size and batch count must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DfqError::InvalidArgument(format!(
                "synthesis learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.loss_kind.uses_bns() && self.batch_size < 2 {
            return Err(DfqError::Contract(
                "batch statistics are undefined for a batch of one".into(),
            ));
        }
        Ok(())
    }
}

/// Loss and target-class summaries of one iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStep {
    pub iteration: usize,
    pub loss: f64,
    /// Batch mean of the target logit `M_y(x)`.
    pub target_logit: f64,
    /// Batch mean of the target probability `p_y`.
    pub target_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// One entry per iterate, `0..=iterations`.
    pub trajectory: Vec<SynthStep>,
}

impl SynthBatch {
    pub fn final_loss(&self) -> f64 {
        self.trajectory.last().map_or(f64::NAN, |s| s.loss)
    }

    pub fn into_dataset(self, class_count: usize) -> Result<Dataset> {
        Dataset::new(self.images, self.labels, class_count)
    }
}

/// Deterministic sub-seed for stream `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over a mixed input
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn initial_batch(fp: &ModelGraph, cfg: &SynthesisConfig) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [c, h, w] = fp.input_shape;
    let images = match cfg.init {
        Init::StandardGaussian => Tensor::randn(&[cfg.batch_size, c, h, w], &mut rng),
    };
    let labels = match cfg.label_policy {
        LabelPolicy::RoundRobin => (0..cfg.batch_size).map(|i| i % fp.class_count).collect(),
        LabelPolicy::UniformRandom => (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..fp.class_count))
            .collect(),
    };
    (images, labels)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn objective(
    fp: &ModelGraph,
    tape: &mut Tape,
    x: Var,
    labels: &[usize],
    kind: LossKind,
) -> Result<(Var, Var)> {
    let opts = ForwardOptions {
        bn_input_stats: kind.uses_bns(),
        ..ForwardOptions::new(BnMode::EvalStats)
    };
    let out = forward_on_tape(fp, tape, x, &opts)?;
    let z = out.logits;
    let loss = match kind {
        LossKind::Abs => abs_loss(tape, z, labels)?,
        LossKind::Ce => ce_loss(tape, z, labels)?,
        LossKind::Mae => mae_loss(tape, z, labels)?,
        LossKind::Mse => mse_loss(tape, z, labels)?,
        LossKind::Bns => bns_loss(tape, &out.bn_inputs, &fp.bn_stats())?,
        LossKind::AbsBns => {
            let a = abs_loss(tape, z, labels)?;
            let b = bns_loss(tape, &out.bn_inputs, &fp.bn_stats())?;
            tape.add(a, b)?
        }
    };
    Ok((loss, z))
}

fn summarize(iteration: usize, loss: f64, logits: &Tensor, labels: &[usize]) -> SynthStep {
    let c = logits.shape()[1];
    let n = labels.len() as f64;
    let (mut zt, mut pt) = (0.0, 0.0);
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        zt += row[y];
        pt += (row[y] - max).exp() / denom;
    }
    SynthStep {
        iteration,
        loss,
        target_logit: zt / n,
        target_prob: pt / n,
    }
}

/// Optimize one batch of inputs for `cfg.loss_kind`. The model is only read.
pub fn synthesize(fp: &ModelGraph, cfg: &SynthesisConfig) -> Result<SynthBatch> {
    cfg.validate()?;
    if cfg.loss_kind.uses_bns() && fp.bn_layers().is_empty() {
        return Err(DfqError::Contract(
            "statistics matching needs at least one batch-norm layer".into(),
        ));
    }
    let (mut images, labels) = initial_batch(fp, cfg);
    let mut adam = Adam::new(images.numel());
    let mut trajectory = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), it < cfg.iterations);
        let (loss, z) = objective(fp, &mut tape, x, &labels, cfg.loss_kind)
            .map_err(|e| diverged(e, it))?;
        trajectory.push(summarize(it, tape.value(loss).item(), tape.value(z), &labels));
        if it == cfg.iterations {
            break;
        }
        let mut grads = tape.backward(loss).map_err(|e| diverged(e, it))?;
        let g = grads
            .take(x)
            .ok_or_else(|| DfqError::Contract("loss does not depend on the input".into()))?;
        match cfg.optimizer {
            Optimizer::Gd => {
                for (v, d) in images.data_mut().iter_mut().zip(g.data()) {
                    *v -= cfg.lr * d;
                }
            }
            Optimizer::Adam => adam.step(images.data_mut(), g.data(), cfg.lr),
        }
        if !images.is_finite() {
            return Err(DfqError::Numerical(format!(
                "synthesis diverged at iteration {it}: non-finite image values"
            )));
        }
    }
    Ok(SynthBatch {
        images,
        labels,
        trajectory,
    })
}

fn diverged(e: DfqError, it: usize) -> DfqError {
    match e {
        DfqError::Numerical(msg) => {
            DfqError::Numerical(format!("synthesis diverged at iteration {it}: {msg}"))
        }
        other => other,
    }
}

/// AAC batch: inputs that maximize the target logit (or another
/// classification loss when `cfg.loss_kind` says so, for loss comparisons).
pub fn generate_aac_batch(fp: &ModelGraph, cfg: &SynthesisConfig) -> Result<SynthBatch> {
    if cfg.loss_kind == LossKind::Bns {
        return Err(DfqError::InvalidArgument(
            "AAC generation needs a label-driven loss, got bns".into(),
        ));
    }
    synthesize(fp, cfg)
}

/// BNS batch: inputs whose batch-norm input statistics match the stored ones.
pub fn generate_bns_batch(fp: &ModelGraph, cfg: &SynthesisConfig) -> Result<SynthBatch> {
    let cfg = SynthesisConfig {
        loss_kind: LossKind::Bns,
        ..cfg.clone()
    };
    if cfg.batch_size < 2 {
        return Err(DfqError::Contract(
            "batch statistics are undefined for a batch of one".into(),
        ));
    }
    let b = synthesize(fp, &cfg)?;
    let (first, last) = (b.trajectory[0].loss, b.final_loss());
    if cfg.iterations > 0 && last > cfg.bns_warn_ratio * first {
        log::warn!(
            "statistics matching stalled: loss {last:.4} is above {} × initial {first:.4}",
            cfg.bns_warn_ratio
        );
    }
    Ok(b)
}

/// `cfg.batches` independent batches, batch `i` seeded with `derive_seed(cfg.seed, i)`.
pub fn generate_batches(
    fp: &ModelGraph,
    cfg: &SynthesisConfig,
    generate: fn(&ModelGraph, &SynthesisConfig) -> Result<SynthBatch>,
) -> Result<Vec<SynthBatch>> {
    (0..cfg.batches as u64)
        .map(|i| {
            let c = SynthesisConfig {
                seed: derive_seed(cfg.seed, i),
                ..cfg.clone()
            };
            generate(fp, &c)
        })
        .collect()
}

/// Cross-entropy of the full-precision model on a synthetic batch.
pub fn evaluate_synthesis_quality(fp: &ModelGraph, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = logits_chunked(fp, images, &ForwardOptions::new(BnMode::EvalStats), EVAL_CHUNK)?;
    ce_value(&logits, labels)
}

/// Line-oriented trajectory: a `# iteration loss target_logit target_prob`
/// header, then one row per iterate.
pub fn trajectory_text(steps: &[SynthStep]) -> String {
    let mut s = String::from("# iteration loss target_logit target_prob\n");
    for t in steps {
        let _ = writeln!(
            s,
            "{} {:.10e} {:.10e} {:.10e}",
            t.iteration, t.loss, t.target_logit, t.target_prob
        );
    }
    s
}

pub fn write_trajectory(path: &Path, steps: &[SynthStep], overwrite: bool) -> Result<()> {
    write_file(path, trajectory_text(steps).as_bytes(), overwrite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zoo;

    fn small_cfg(kind: LossKind, iterations: usize) -> SynthesisConfig {
        SynthesisConfig {
            batch_size: 4,
            iterations,
            loss_kind: kind,
            ..SynthesisConfig::aac()
        }
    }

    fn model() -> ModelGraph {
        zoo::tiny_block_net([3, 16, 16], 4, 5).unwrap()
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let m = model();
        let cfg = small_cfg(LossKind::Abs, 0);
        let b = generate_aac_batch(&m, &cfg).unwrap();
        let (init, labels) = initial_batch(&m, &cfg);
        assert_eq!(b.images, init);
        assert_eq!(b.labels, labels);
        assert_eq!(b.labels, vec![0, 1, 2, 3]);
        assert_eq!(b.trajectory.len(), 1);
    }

    #[test]
    fn model_is_untouched_and_runs_are_deterministic() {
        let m = model();
        let before = m.clone();
        let cfg = small_cfg(LossKind::AbsBns, 3);
        let a = synthesize(&m, &cfg).unwrap();
        let b = synthesize(&m, &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(a, b);
        let other = synthesize(&m, &SynthesisConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.images, other.images);
    }

    #[test]
    fn abs_raises_the_target_logit() {
        let m = model();
        for opt in [Optimizer::Gd, Optimizer::Adam] {
            let cfg = SynthesisConfig {
                optimizer: opt,
                ..small_cfg(LossKind::Abs, 10)
            };
            let b = synthesize(&m, &cfg).unwrap();
            let t = &b.trajectory;
            assert!(t[10].target_logit > t[0].target_logit, "{opt:?}");
            assert!(t[10].loss < t[0].loss);
        }
    }

    #[test]
    fn bns_rejects_batch_of_one() {
        let cfg = SynthesisConfig {
            batch_size: 1,
            ..SynthesisConfig::bns()
        };
        assert!(matches!(
            generate_bns_batch(&model(), &cfg),
            Err(DfqError::Contract(_))
        ));
    }

    #[test]
    fn loss_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 100);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn trajectory_has_one_row_per_iterate() {
        let b = synthesize(&model(), &small_cfg(LossKind::Ce, 5)).unwrap();
        let text = trajectory_text(&b.trajectory);
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(1).unwrap().starts_with("0 "));
    }
}
