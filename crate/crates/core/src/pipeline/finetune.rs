//! Distillation fine-tuning of a calibrated quantized model on synthetic data.

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::softmax_rows;
use crate::autograd::Tape;
use crate::calibration::{adapt_bn_statistics, MomentumPolicy};
use crate::error::{DfqError, Result};
use crate::nn::loss::ce_loss;
use crate::nn::{forward_on_tape, logits_chunked, BnMode, ForwardOptions, ModelGraph, Sgd, EVAL_CHUNK};
use crate::quant::QuantModel;
use crate::synthesis::{derive_seed, generate_aac_batch, generate_bns_batch, SynthesisConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Softening temperature of the distillation term.
    pub temperature: f64,
    /// Weight of the hard-label cross-entropy on AAC samples.
    pub hard_weight: f64,
    /// Minibatch size for the weight updates.
    pub batch_size: usize,
    /// Passes over each epoch's pool.
    pub passes: usize,
    /// Pool generation: one AAC and one BNS batch per epoch with these settings.
    pub aac: SynthesisConfig,
    pub bns: SynthesisConfig,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 12,
            lr: 3e-4,
            momentum: 0.9,
            temperature: 4.0,
            hard_weight: 0.5,
            batch_size: 16,
            passes: 2,
            aac: SynthesisConfig::aac(),
            bns: SynthesisConfig::bns(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Ok(());
        }
        if !(self.lr > 0.0 && self.temperature > 0.0 && self.hard_weight >= 0.0) {
            return Err(DfqError::InvalidArgument(
                "fine-tune lr and temperature must be positive, hard weight non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.passes == 0 {
            return Err(DfqError::InvalidArgument(
                "fine-tune batch size and passes must be positive".into(),
            ));
        }
        self.aac.validate()?;
        self.bns.validate()
    }
}

/// One synthetic pool part with the teacher's softened class probabilities.
struct PoolPart {
    images: Tensor,
    labels: Option<Vec<usize>>,
    teacher: Tensor,
}

/// The teacher's class probabilities at `temperature`.
fn teacher_targets(fp: &ModelGraph, images: &Tensor, temperature: f64) -> Result<Tensor> {
    let z = logits_chunked(fp, images, &ForwardOptions::new(BnMode::EvalStats), EVAL_CHUNK)?;
    let c = z.shape()[1];
    let scaled: Vec<f64> = z.data().iter().map(|v| v / temperature).collect();
    Tensor::new(z.shape().to_vec(), softmax_rows(c, &scaled))
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    t.select_batch(idx)
}

/// Straight-through distillation of `qm` towards `fp`.
///
/// Each epoch draws a fresh pool (one AAC and one BNS batch) from the
/// full-precision model, then updates the latent weights of `qm` by SGD on
/// `T²·CE(soft teacher, soft student) + hard_weight·CE(labels)` where labels
/// exist. Quantizer ranges stay frozen; batch-norm layers normalize with
/// their stored statistics during training, and those statistics are
/// re-estimated on `bn_batches` after the final epoch. With zero epochs the
/// model is returned unchanged.
pub fn fine_tune(
    qm: &QuantModel,
    fp: &ModelGraph,
    cfg: &FineTuneConfig,
    seed: u64,
    bn_batches: &[Tensor],
    bn_policy: MomentumPolicy,
) -> Result<QuantModel> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(qm.clone());
    }
    qm.require_calibrated()?;
    if bn_batches.is_empty() {
        return Err(DfqError::InvalidArgument(
            "fine-tuning needs batches for the final batch-norm re-estimation".into(),
        ));
    }
    let mut student = qm.clone();
    let mut sgd = Sgd::new(student.base(), cfg.lr, cfg.momentum, 0.0);
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(seed, epoch as u64);
        let aac = generate_aac_batch(
            fp,
            &SynthesisConfig {
                seed: derive_seed(epoch_seed, 0),
                ..cfg.aac.clone()
            },
        )?;
        let bns = generate_bns_batch(
            fp,
            &SynthesisConfig {
                seed: derive_seed(epoch_seed, 1),
                ..cfg.bns.clone()
            },
        )?;
        let pool = [
            PoolPart {
                teacher: teacher_targets(fp, &aac.images, cfg.temperature)?,
                images: aac.images,
                labels: Some(aac.labels),
            },
            PoolPart {
                teacher: teacher_targets(fp, &bns.images, cfg.temperature)?,
                images: bns.images,
                labels: None,
            },
        ];
        let mut total = 0.0;
        let mut steps = 0usize;
        for _ in 0..cfg.passes {
            for part in &pool {
                let n = part.images.batch();
                let mut start = 0;
                while start < n {
                    let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
                    start += cfg.batch_size;
                    let labels: Option<Vec<usize>> =
                        part.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
                    total += train_step(
                        &mut student,
                        &mut sgd,
                        &rows(&part.images, &idx),
                        &rows(&part.teacher, &idx),
                        labels.as_deref(),
                        cfg,
                    )
                    .map_err(|e| match e {
                        DfqError::Numerical(m) => DfqError::Numerical(format!(
                            "fine-tuning diverged in epoch {epoch}: {m}"
                        )),
                        other => other,
                    })?;
                    steps += 1;
                }
            }
        }
        log::info!("fine-tune epoch {epoch}: mean loss {:.4}", total / steps.max(1) as f64);
    }
    let (adapted, _) = adapt_bn_statistics(&student, bn_batches, bn_policy)?;
    Ok(adapted)
}

fn train_step(
    student: &mut QuantModel,
    sgd: &mut Sgd,
    images: &Tensor,
    teacher: &Tensor,
    labels: Option<&[usize]>,
    cfg: &FineTuneConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let opts = ForwardOptions {
        trainable: true,
        quant: student.hooks(false),
        ..ForwardOptions::new(BnMode::EvalStats)
    };
    let out = forward_on_tape(student.base(), &mut tape, x, &opts)?;
    let mut loss = tape.soft_cross_entropy(out.logits, teacher, cfg.temperature)?;
    if let Some(labels) = labels {
        if cfg.hard_weight > 0.0 {
            let hard = ce_loss(&mut tape, out.logits, labels)?;
            let hard = tape.scale(hard, cfg.hard_weight)?;
            loss = tape.add(loss, hard)?;
        }
    }
    let value = tape.value(loss).item();
    let leaves: Vec<_> = out.params.iter().flatten().copied().collect();
    let mut grads = tape.backward(loss)?;
    let g: Vec<Option<Vec<f64>>> = leaves
        .iter()
        .map(|&v| grads.take(v).map(|t| t.into_data()))
        .collect();
    sgd.step(student.base_mut(), &g);
    Ok(value)
}
