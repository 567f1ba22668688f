use crate::data::Dataset;
use crate::error::{DfqError, Result};
use crate::nn::forward::{logits_chunked, BnMode, ForwardOptions};
use crate::nn::graph::ModelGraph;
use crate::tensor::Tensor;

/// Anything that maps an image batch to class logits.
pub trait Classifier {
    fn class_count(&self) -> usize;
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

pub(crate) const EVAL_CHUNK: usize = 250;

impl Classifier for ModelGraph {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        logits_chunked(self, images, &ForwardOptions::new(BnMode::EvalStats), EVAL_CHUNK)
    }
}

/// Top-1 accuracy in percent.
pub fn evaluate(model: &dyn Classifier, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(DfqError::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    if data.class_count != model.class_count() {
        return Err(DfqError::InvalidArgument(format!(
            "dataset has {} classes, model predicts {}",
            data.class_count,
            model.class_count()
        )));
    }
    let logits = model.logits(&data.images)?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}
