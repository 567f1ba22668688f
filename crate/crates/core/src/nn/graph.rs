use serde::{Deserialize, Serialize};

use crate::error::{DfqError, Result};
use crate::tensor::Tensor;

/// A learnable tensor persisted in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DfqError::InvalidArgument(format!(
                "parameter shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Param { shape, data })
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Param {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rounds to the nearest `f32`.
    pub fn from_tensor(t: &Tensor) -> Self {
        Param {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Stored normalization statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f32>,
    /// Standard deviation (not variance); strictly positive.
    pub std: Vec<f32>,
    pub eps: f32,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(DfqError::InvalidArgument(
                "batch-norm mean/std lengths differ".into(),
            ));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(DfqError::InvalidArgument(format!(
                "batch-norm std must be positive, found {s}"
            )));
        }
        Ok(())
    }

    pub(crate) fn mean_f64(&self) -> Vec<f64> {
        self.mean.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn std_f64(&self) -> Vec<f64> {
        self.std.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub stats: BnStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

/// One entry of a model's ordered layer list.
///
/// Values are numbered so that value `0` is the model input and value `i + 1`
/// is the output of layer `i`. A [`Layer::ResidualAdd`] adds value `from` to
/// its input.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    AvgPool { kernel: usize },
    MaxPool { kernel: usize },
    Linear(Linear),
    ResidualAdd { from: usize },
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d,
    Batchnorm2d,
    Relu,
    Avgpool,
    Maxpool,
    Linear,
    ResidualAdd,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::BatchNorm2d(_) => LayerKind::Batchnorm2d,
            Layer::Relu => LayerKind::Relu,
            Layer::AvgPool { .. } => LayerKind::Avgpool,
            Layer::MaxPool { .. } => LayerKind::Maxpool,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::ResidualAdd { .. } => LayerKind::ResidualAdd,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// Parameters in declaration order (the order used by the model file and
    /// by the trainers).
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight],
            Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight],
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Weight tensor subject to weight quantization, if any.
    pub fn quantizable_weight(&self) -> Option<&Param> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Batchnorm2d => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::Avgpool => "avgpool",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Linear => "linear",
            LayerKind::ResidualAdd => "residual-add",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// A feed-forward classifier: ordered layers plus input/output contract.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    pub class_count: usize,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
}

impl ModelGraph {
    pub fn new(layers: Vec<Layer>, class_count: usize, input_shape: [usize; 3]) -> Result<Self> {
        let m = ModelGraph {
            layers,
            class_count,
            input_shape,
        };
        m.validate()?;
        Ok(m)
    }

    /// Per-sample output shape of every value (index 0 is the input).
    pub fn value_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let inp = shapes.last().unwrap().clone();
            let bad = |what: String| DfqError::InvalidArgument(format!("layer {i}: {what}"));
            let out = match layer {
                Layer::Conv2d(c) => {
                    let [ch, h, w] = inp[..] else {
                        return Err(bad(format!("conv2d needs CHW input, got {inp:?}")));
                    };
                    if ch != c.in_channels {
                        return Err(bad(format!("conv2d expects {} channels, got {ch}", c.in_channels)));
                    }
                    let want = [c.out_channels, c.in_channels, c.kernel, c.kernel];
                    if c.weight.shape() != want {
                        return Err(bad(format!("conv2d weight {:?} != {want:?}", c.weight.shape())));
                    }
                    if c.stride == 0 || h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel {
                        return Err(bad("conv2d geometry does not fit input".into()));
                    }
                    vec![
                        c.out_channels,
                        (h + 2 * c.padding - c.kernel) / c.stride + 1,
                        (w + 2 * c.padding - c.kernel) / c.stride + 1,
                    ]
                }
                Layer::BatchNorm2d(b) => {
                    if inp.len() != 3 || inp[0] != b.channels {
                        return Err(bad(format!("batchnorm2d over {} channels got {inp:?}", b.channels)));
                    }
                    if b.gamma.shape() != [b.channels] || b.beta.shape() != [b.channels] {
                        return Err(bad("batchnorm2d affine shape".into()));
                    }
                    if b.stats.channels() != b.channels {
                        return Err(bad("batchnorm2d stats length".into()));
                    }
                    b.stats.validate()?;
                    inp
                }
                Layer::Relu => {
                    let prev = i.checked_sub(1).map(|p| self.layers[p].kind());
                    if !matches!(prev, Some(LayerKind::Conv2d | LayerKind::Batchnorm2d)) {
                        return Err(bad("relu must directly follow conv2d or batchnorm2d".into()));
                    }
                    inp
                }
                Layer::AvgPool { kernel } | Layer::MaxPool { kernel } => {
                    let [ch, h, w] = inp[..] else {
                        return Err(bad(format!("pooling needs CHW input, got {inp:?}")));
                    };
                    if *kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                        return Err(bad(format!("pool kernel {kernel} does not tile {h}x{w}")));
                    }
                    vec![ch, h / kernel, w / kernel]
                }
                Layer::Linear(l) => {
                    if inp != [l.in_features] {
                        return Err(bad(format!("linear expects [{}], got {inp:?}", l.in_features)));
                    }
                    if l.weight.shape() != [l.out_features, l.in_features]
                        || l.bias.shape() != [l.out_features]
                    {
                        return Err(bad("linear parameter shapes".into()));
                    }
                    vec![l.out_features]
                }
                Layer::ResidualAdd { from } => {
                    if *from > i {
                        return Err(bad(format!("residual source {from} is not an earlier value")));
                    }
                    if shapes[*from] != inp {
                        return Err(bad(format!(
                            "residual shapes differ: {:?} vs {inp:?}",
                            shapes[*from]
                        )));
                    }
                    inp
                }
                Layer::Flatten => vec![inp.iter().product()],
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(DfqError::InvalidArgument("class_count must be positive".into()));
        }
        let shapes = self.value_shapes()?;
        let last = shapes.last().unwrap();
        if *last != [self.class_count] {
            return Err(DfqError::InvalidArgument(format!(
                "model ends in {last:?}, expected [{}] logits",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Layer indices of batch-norm layers in network order.
    pub fn bn_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::BatchNorm2d(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bn_stats(&self) -> Vec<BnStats> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm2d(b) => Some(b.stats.clone()),
                _ => None,
            })
            .collect()
    }

    /// Replace the statistics of every batch-norm layer, in network order.
    pub fn set_bn_stats(&mut self, stats: &[BnStats]) -> Result<()> {
        let idx = self.bn_layers();
        if idx.len() != stats.len() {
            return Err(DfqError::InvalidArgument(format!(
                "{} batch-norm layers but {} statistics",
                idx.len(),
                stats.len()
            )));
        }
        for (i, s) in idx.into_iter().zip(stats) {
            if let Layer::BatchNorm2d(b) = &mut self.layers[i] {
                if s.channels() != b.channels {
                    return Err(DfqError::InvalidArgument("batch-norm channel mismatch".into()));
                }
                s.validate()?;
                b.stats = s.clone();
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(Param::numel)
            .sum()
    }

    /// Human-readable name of a layer, e.g. `"3:conv2d"`.
    pub fn layer_name(&self, i: usize) -> String {
        format!("{i}:{}", self.layers[i].kind().name())
    }
}
