//! Full-precision pretraining with SGD + momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{DfqError, Result};
use crate::nn::eval::evaluate;
use crate::nn::forward::{forward_on_tape, BnMode, ForwardOptions};
use crate::nn::graph::{BnStats, Layer, ModelGraph, Param};
use crate::nn::loss::ce_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Weight of the current batch in the running batch-norm statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub val_accuracy: Option<f64>,
}

/// SGD state: one momentum buffer per parameter tensor, in model order.
pub(crate) struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &ModelGraph, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| vec![0.0; p.numel()])
            .collect();
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Apply one update. `grads` holds one gradient per parameter in model
    /// order (`None` = no gradient reached it).
    pub fn step(&mut self, model: &mut ModelGraph, grads: &[Option<Vec<f64>>]) {
        let mut k = 0;
        for layer in &mut model.layers {
            let decays = matches!(layer, Layer::Conv2d(_) | Layer::Linear(_));
            for (j, p) in layer.params_mut().into_iter().enumerate() {
                if let Some(g) = &grads[k] {
                    let wd = if decays && j == 0 { self.weight_decay } else { 0.0 };
                    update(p, g, &mut self.velocity[k], self.lr, self.momentum, wd);
                }
                k += 1;
            }
        }
    }
}

fn update(p: &mut Param, g: &[f64], v: &mut [f64], lr: f64, mom: f64, wd: f64) {
    for ((w, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
        let wf = *w as f64;
        *v = mom * *v + g + wd * wf;
        *w = (wf - lr * *v) as f32;
    }
}

fn blend_stats(stats: &mut BnStats, mean: &[f64], var: &[f64], momentum: f64) {
    for c in 0..stats.mean.len() {
        let m = (1.0 - momentum) * stats.mean[c] as f64 + momentum * mean[c];
        let old_var = (stats.std[c] as f64).powi(2);
        let v = (1.0 - momentum) * old_var + momentum * var[c];
        stats.mean[c] = m as f32;
        stats.std[c] = (v.sqrt() as f32).max(f32::MIN_POSITIVE);
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Train `model` on `train` with cross-entropy. Batch-norm layers normalize
/// with batch statistics and keep exponential running estimates in their
/// stored statistics. Deterministic for a given seed.
pub fn train_fp(
    mut model: ModelGraph,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, TrainReport)> {
    if cfg.epochs == 0 {
        let val_accuracy = val.map(|v| evaluate(&model, v)).transpose()?;
        return Ok((
            model,
            TrainReport {
                epochs: Vec::new(),
                val_accuracy,
            },
        ));
    }
    if cfg.batch_size < 2 || train.len() < 2 {
        return Err(DfqError::InvalidArgument(
            "training needs a batch size and dataset of at least 2".into(),
        ));
    }
    if train.class_count != model.class_count {
        return Err(DfqError::InvalidArgument(format!(
            "dataset has {} classes, model predicts {}",
            train.class_count, model.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            if rows.len() < 2 {
                continue;
            }
            sgd.lr = cosine_lr(cfg.lr, step, total);
            let batch = train.subset(rows);
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let opts = ForwardOptions {
                trainable: true,
                ..ForwardOptions::new(BnMode::TrainStats)
            };
            let out = forward_on_tape(&model, &mut tape, x, &opts)
                .map_err(|e| diverged(e, epoch, step))?;
            let loss = ce_loss(&mut tape, out.logits, &batch.labels)
                .map_err(|e| diverged(e, epoch, step))?;
            let lv = tape.value(loss).item();
            let preds = tape.value(out.logits).argmax_rows();
            correct += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            seen += rows.len();
            loss_sum += lv * rows.len() as f64;
            let leaves: Vec<_> = out.params.iter().flatten().copied().collect();
            let moments = out.bn_moments;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Option<Vec<f64>>> = leaves
                .iter()
                .map(|&v| grads.take(v).map(|t| t.into_data()))
                .collect();
            sgd.step(&mut model, &g);
            for (layer, m) in moments {
                if let Layer::BatchNorm2d(b) = &mut model.layers[layer] {
                    blend_stats(&mut b.stats, &m.mean, &m.var, cfg.bn_momentum);
                }
            }
            step += 1;
        }
        let val_accuracy = val.map(|v| evaluate(&model, v)).transpose()?;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: 100.0 * correct as f64 / seen.max(1) as f64,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.2}% val {:?}",
            stats.mean_loss,
            stats.train_accuracy,
            stats.val_accuracy
        );
        history.push(stats);
    }
    let val_accuracy = history.last().and_then(|h| h.val_accuracy);
    Ok((
        model,
        TrainReport {
            epochs: history,
            val_accuracy,
        },
    ))
}

fn diverged(e: DfqError, epoch: usize, step: usize) -> DfqError {
    match e {
        DfqError::Numerical(msg) => {
            DfqError::Numerical(format!("training diverged at epoch {epoch}, step {step}: {msg}"))
        }
        other => other,
    }
}
