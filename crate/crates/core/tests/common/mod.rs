#![allow(dead_code)]

pub mod grad_cases;

use std::sync::OnceLock;

use dfq_core::data::{make_desk_dataset, Dataset, DeskDatasetConfig};
use dfq_core::nn::{train_fp, zoo, BatchNorm2d, BnStats, Conv2d, Layer, Linear, ModelGraph, Param, TrainConfig};

/// A TinyBlockNet trained briefly on a reduced desk dataset, with its
/// held-out split. Shared by every test in one binary.
pub fn quick_model() -> &'static (ModelGraph, Dataset) {
    static CELL: OnceLock<(ModelGraph, Dataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = make_desk_dataset(&DeskDatasetConfig {
            samples_per_class: 150,
            ..DeskDatasetConfig::default()
        })
        .unwrap();
        let (train, val) = data.split_tail(300).unwrap();
        let m = zoo::tiny_block_net([3, 32, 32], 10, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        let (m, _) = train_fp(m, &train, None, &cfg).unwrap();
        (m, val)
    })
}

/// `Conv1x1(1→channels) → ReLU → Flatten → Linear(→classes)` on `1×side×side` inputs.
pub fn single_site_model(channels: usize, side: usize, classes: usize, weights: &[f32], head: &[f32]) -> ModelGraph {
    let feat = channels * side * side;
    assert_eq!(weights.len(), channels);
    assert_eq!(head.len(), classes * feat);
    ModelGraph::new(
        vec![
            Layer::Conv2d(Conv2d {
                in_channels: 1,
                out_channels: channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight: Param::new(vec![channels, 1, 1, 1], weights.to_vec()).unwrap(),
            }),
            Layer::Relu,
            Layer::Flatten,
            Layer::Linear(Linear {
                in_features: feat,
                out_features: classes,
                weight: Param::new(vec![classes, feat], head.to_vec()).unwrap(),
                bias: Param::full(&[classes], 0.0),
            }),
        ],
        classes,
        [1, side, side],
    )
    .unwrap()
}

/// `Conv1x1(identity) → BN(μ, σ) → ReLU → Flatten → Linear` on `1×side×side` inputs.
pub fn single_bn_model(side: usize, mean: f32, std: f32) -> ModelGraph {
    let feat = side * side;
    ModelGraph::new(
        vec![
            Layer::Conv2d(Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight: Param::full(&[1, 1, 1, 1], 1.0),
            }),
            Layer::BatchNorm2d(BatchNorm2d {
                channels: 1,
                gamma: Param::full(&[1], 1.0),
                beta: Param::full(&[1], 0.0),
                stats: BnStats { mean: vec![mean], std: vec![std], eps: 1e-5 },
            }),
            Layer::Relu,
            Layer::Flatten,
            Layer::Linear(Linear {
                in_features: feat,
                out_features: 2,
                weight: Param::new(vec![2, feat], (0..2 * feat).map(|i| ((i % 7) as f32 - 3.0) * 0.1).collect()).unwrap(),
                bias: Param::full(&[2], 0.0),
            }),
        ],
        2,
        [1, side, side],
    )
    .unwrap()
}
