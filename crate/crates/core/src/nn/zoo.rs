//! Small reference architectures built from Conv→BN→ReLU blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::graph::{BatchNorm2d, BnStats, Conv2d, Layer, Linear, ModelGraph, Param};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    TinyBlockNet,
    MiniResNet,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tiny-block-net" | "tinyblocknet" => Ok(Architecture::TinyBlockNet),
            "mini-resnet" | "miniresnet" => Ok(Architecture::MiniResNet),
            other => Err(format!("unknown architecture '{other}' (tiny-block-net, mini-resnet)")),
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
}

impl Builder {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Param {
        let t = Tensor::randn(shape, &mut self.rng);
        let scale = (2.0 / fan_in as f64).sqrt();
        Param::from_tensor(&t.map(|v| v * scale))
    }

    fn conv_bn_relu(&mut self, cin: usize, cout: usize, stride: usize, relu: bool) {
        let weight = self.he(&[cout, cin, 3, 3], cin * 9);
        self.layers.push(Layer::Conv2d(Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            padding: 1,
            weight,
        }));
        self.layers.push(Layer::BatchNorm2d(BatchNorm2d {
            channels: cout,
            gamma: Param::full(&[cout], 1.0),
            beta: Param::full(&[cout], 0.0),
            stats: BnStats::identity(cout),
        }));
        if relu {
            self.layers.push(Layer::Relu);
        }
    }

    fn head(&mut self, channels: usize, pool: usize, classes: usize) {
        self.layers.push(Layer::AvgPool { kernel: pool });
        self.layers.push(Layer::Flatten);
        let weight = self.he(&[classes, channels], channels);
        self.layers.push(Layer::Linear(Linear {
            in_features: channels,
            out_features: classes,
            weight,
            bias: Param::full(&[classes], 0.0),
        }));
    }
}

/// Four Conv→BN→ReLU blocks, global average pooling and a linear classifier.
///
/// 3×32×32 → 16×16×16 → 32×8×8 → 32×8×8 → 64×4×4 → 64 → classes.
pub fn tiny_block_net(input_shape: [usize; 3], classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        layers: Vec::new(),
    };
    let [c, h, _] = input_shape;
    b.conv_bn_relu(c, 16, 2, true);
    b.conv_bn_relu(16, 32, 2, true);
    b.conv_bn_relu(32, 32, 1, true);
    b.conv_bn_relu(32, 64, 2, true);
    b.head(64, h / 8, classes);
    ModelGraph::new(b.layers, classes, input_shape)
}

/// Stem, two identity-shortcut residual stages, and a linear classifier.
///
/// Each residual block is `x + BN(conv(ReLU(BN(conv(x)))))`; the sum is left
/// un-rectified, so its activation site carries a signed range.
pub fn mini_resnet(input_shape: [usize; 3], classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        layers: Vec::new(),
    };
    let [c, h, _] = input_shape;
    b.conv_bn_relu(c, 16, 2, true);
    b.layers.push(Layer::MaxPool { kernel: 2 });
    // stage 1 at h/4
    let skip = b.layers.len();
    b.conv_bn_relu(16, 16, 1, true);
    b.conv_bn_relu(16, 16, 1, false);
    b.layers.push(Layer::ResidualAdd { from: skip });
    // transition
    b.conv_bn_relu(16, 32, 2, true);
    // stage 2 at h/8
    let skip = b.layers.len();
    b.conv_bn_relu(32, 32, 1, true);
    b.conv_bn_relu(32, 32, 1, false);
    b.layers.push(Layer::ResidualAdd { from: skip });
    b.head(32, h / 8, classes);
    ModelGraph::new(b.layers, classes, input_shape)
}

pub fn build(arch: Architecture, input_shape: [usize; 3], classes: usize, seed: u64) -> Result<ModelGraph> {
    match arch {
        Architecture::TinyBlockNet => tiny_block_net(input_shape, classes, seed),
        Architecture::MiniResNet => mini_resnet(input_shape, classes, seed),
    }
}
