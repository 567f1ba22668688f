//! Layers, losses, the model zoo, model files and full-precision training.

mod eval;
mod forward;
mod graph;
pub mod io;
pub mod loss;
mod train;
pub mod zoo;

pub use eval::{evaluate, Classifier};
pub(crate) use eval::EVAL_CHUNK;
pub use forward::{model_forward, BatchStats, BnInputStats, BnMode, ModelOutput};
pub(crate) use forward::{forward_on_tape, logits_chunked, run_detached, ForwardOptions, QuantHooks};
pub use graph::{BatchNorm2d, BnStats, Conv2d, Layer, LayerKind, Linear, ModelGraph, Param};
pub use io::{load_model, save_model};
pub use train::{train_fp, EpochStats, TrainConfig, TrainReport};
pub(crate) use train::Sgd;
