//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. Tapes are
//! consumed by `backward`; build a fresh one per iteration.

use crate::autograd::kernels::{self, ConvGeom};
use crate::error::{DfqError, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch moments reported by the batch-statistics normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ChannelMean(Var),
    ChannelStd {
        x: Var,
        mean: Vec<f64>,
    },
    FakeQuant {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    TargetLogit {
        logits: Var,
        labels: Vec<usize>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        temperature: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DfqError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_labels(op: &'static str, logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(DfqError::InvalidArgument(format!(
            "{op}: logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(DfqError::shape(op, logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(DfqError::InvalidArgument(format!(
            "{op}: label {bad} out of range for {c} classes"
        )));
    }
    Ok((n, c))
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(DfqError::InvalidArgument(format!(
            "{op}: expected NCHW input, got {:?}",
            t.shape()
        ))),
    }
}

/// (batch, channels, spatial) view for per-channel reductions over NCHW or NC.
fn channel_view(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(DfqError::InvalidArgument(format!(
            "{op}: expected NC or NCHW input, got {:?}",
            t.shape()
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input. Gradients are reported for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(DfqError::Numerical(format!(
                "non-finite value produced by operation #{}",
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, &[a], Op::Scale(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(out, &[a], Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push(out, &[a], Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(DfqError::shape("matmul", ta.shape(), tb.shape())),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 1.0, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, &[a], Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, &[a], Op::Reshape(a))
    }

    /// Square-kernel convolution without bias. `x: [N,C,H,W]`, `w: [O,C,K,K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, c, h, wd) = nchw("conv2d", tx)?;
        let geom = match *tw.shape() {
            [o, ci, k, k2] if ci == c && k == k2 && h + 2 * padding >= k && wd + 2 * padding >= k => {
                ConvGeom {
                    batch: n,
                    in_ch: c,
                    height: h,
                    width: wd,
                    out_ch: o,
                    kernel: k,
                    stride,
                    padding,
                }
            }
            _ => return Err(DfqError::shape("conv2d", tx.shape(), tw.shape())),
        };
        if stride == 0 {
            return Err(DfqError::InvalidArgument("conv2d: stride must be ≥ 1".into()));
        }
        let keep = self.nodes[w.0].requires_grad;
        let (y, cols) = kernels::conv2d_forward(&geom, tx.data(), tw.data(), keep);
        let (ho, wo) = geom.out_hw();
        let out = Tensor::from_parts(vec![n, geom.out_ch, ho, wo], y);
        self.push(out, &[x, w], Op::Conv2d { x, w, geom, cols })
    }

    /// `y = x @ wᵀ + b` with `x: [N,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, fin, fout) = match (tx.shape(), tw.shape()) {
            (&[n, i], &[o, i2]) if i == i2 => (n, i, o),
            _ => return Err(DfqError::shape("linear", tx.shape(), tw.shape())),
        };
        let mut y = vec![0.0; n * fout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [fout] {
                return Err(DfqError::shape("linear bias", tw.shape(), tb.shape()));
            }
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(tb.data());
            }
        }
        kernels::gemm(n, fin, fout, tx.data(), false, tw.data(), true, &mut y, 1.0, 1.0);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_parts(vec![n, fout], y), &inputs, Op::Linear { x, w, b })
    }

    /// Non-overlapping `k×k` max pooling.
    pub fn maxpool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("maxpool", self.value(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(DfqError::InvalidArgument(format!(
                "maxpool: kernel {k} does not tile {h}x{w}"
            )));
        }
        let (y, argmax) = kernels::maxpool_forward(n, c, h, w, k, self.value(x).data());
        let out = Tensor::from_parts(vec![n, c, h / k, w / k], y);
        self.push(out, &[x], Op::MaxPool { x, argmax })
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avgpool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("avgpool", self.value(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(DfqError::InvalidArgument(format!(
                "avgpool: kernel {k} does not tile {h}x{w}"
            )));
        }
        let y = kernels::avgpool_forward(n, c, h, w, k, self.value(x).data());
        let out = Tensor::from_parts(vec![n, c, h / k, w / k], y);
        self.push(out, &[x], Op::AvgPool { x, k })
    }

    /// Batch normalization with externally supplied statistics.
    pub fn batchnorm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        std: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, sp) = channel_view("batchnorm", self.value(x))?;
        if mean.len() != c || std.len() != c {
            return Err(DfqError::shape("batchnorm stats", self.value(x).shape(), &[mean.len()]));
        }
        let inv_std: Vec<f64> = std.iter().map(|s| 1.0 / (s * s + eps).sqrt()).collect();
        self.batchnorm_apply(x, gamma, beta, (n, c, sp), mean, inv_std, false)
    }

    /// Batch normalization with the statistics of the current batch (biased
    /// variance). Returns the output and the batch moments.
    pub fn batchnorm_batch(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Moments)> {
        let dims = channel_view("batchnorm", self.value(x))?;
        let (n, c, sp) = dims;
        if n * sp < 2 {
            return Err(DfqError::Contract(
                "batch statistics need at least two values per channel".into(),
            ));
        }
        let (mean, var) = kernels::channel_moments(n, c, sp, self.value(x).data());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.batchnorm_apply(x, gamma, beta, dims, &mean, inv_std, true)?;
        Ok((out, Moments { mean, var }))
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        (n, c, sp): (usize, usize, usize),
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(DfqError::shape("batchnorm affine", &[c], tg.shape()));
        }
        let tx = self.value(x);
        let mut xhat = vec![0.0; tx.numel()];
        let mut y = vec![0.0; tx.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                let (g, be, m, is) = (tg.data()[ch], tb.data()[ch], mean[ch], inv_std[ch]);
                for i in base..base + sp {
                    let h = (tx.data()[i] - m) * is;
                    xhat[i] = h;
                    y[i] = g * h + be;
                }
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), y);
        self.push(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Per-channel mean over batch and spatial positions: `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, sp) = channel_view("channel_mean", self.value(x))?;
        let (mean, _) = kernels::channel_moments(n, c, sp, self.value(x).data());
        self.push(Tensor::from_vec(mean), &[x], Op::ChannelMean(x))
    }

    /// Per-channel biased standard deviation: `[C]`.
    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let (n, c, sp) = channel_view("channel_std", self.value(x))?;
        let (mean, var) = kernels::channel_moments(n, c, sp, self.value(x).data());
        let std = var.iter().map(|v| v.sqrt()).collect();
        self.push(Tensor::from_vec(std), &[x], Op::ChannelStd { x, mean })
    }

    /// Quantize-dequantize with a straight-through backward rule.
    pub fn fake_quant(&mut self, x: Var, p: &QuantParams) -> Result<Var> {
        let out = self.value(x).map(|v| p.fake_quant_value(v));
        self.push(
            out,
            &[x],
            Op::FakeQuant {
                x,
                lo: p.lower(),
                hi: p.upper(),
            },
        )
    }

    /// Row-wise softmax of `[N, C]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(DfqError::InvalidArgument(format!(
                "softmax: expected [batch, classes], got {:?}",
                t.shape()
            )));
        }
        let p = kernels::softmax_rows(t.shape()[1], t.data());
        let out = Tensor::from_parts(t.shape().to_vec(), p);
        self.push(out, &[x], Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = check_labels("cross_entropy", t, labels)?;
        let lse = kernels::logsumexp_rows(c, t.data());
        let loss = (0..n)
            .map(|i| lse[i] - t.data()[i * c + labels[i]])
            .sum::<f64>()
            / n as f64;
        let probs = kernels::softmax_rows(c, t.data());
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean of the target-class logits.
    pub fn target_logit_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = check_labels("target_logit", t, labels)?;
        let s = (0..n).map(|i| t.data()[i * c + labels[i]]).sum::<f64>() / n as f64;
        self.push(
            Tensor::scalar(s),
            &[logits],
            Op::TargetLogit {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Temperature-scaled distillation loss
    /// `T² · mean_i Σ_j −q_ij · log softmax(z_i / T)_j`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor, temperature: f64) -> Result<Var> {
        let t = self.value(logits);
        check_same("soft_cross_entropy", t, target)?;
        if t.shape().len() != 2 || temperature <= 0.0 {
            return Err(DfqError::InvalidArgument(
                "soft_cross_entropy: need [batch, classes] logits and T > 0".into(),
            ));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let scaled: Vec<f64> = t.data().iter().map(|v| v / temperature).collect();
        let lse = kernels::logsumexp_rows(c, &scaled);
        let mut loss = 0.0;
        for i in 0..n {
            for j in 0..c {
                loss -= target.data()[i * c + j] * (scaled[i * c + j] - lse[i]);
            }
        }
        loss *= temperature * temperature / n as f64;
        let probs = kernels::softmax_rows(c, &scaled);
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftCrossEntropy {
                logits,
                target: target.data().to_vec(),
                temperature,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(DfqError::InvalidArgument("backward: root not on this tape".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(DfqError::InvalidArgument(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        let nodes = &self.nodes;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            propagate(nodes, i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    accumulate(nodes, grads, v, |s| {
        for (a, d) in s.iter_mut().zip(delta) {
            *a += d;
        }
    });
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g);
            accumulate(nodes, grads, *b, |s| {
                for (a, d) in s.iter_mut().zip(g) {
                    *a -= d;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
            let db: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
            add_into(nodes, grads, *a, &da);
            add_into(nodes, grads, *b, &db);
        }
        Op::Scale(a, c) => {
            let d: Vec<f64> = g.iter().map(|g| g * c).collect();
            add_into(nodes, grads, *a, &d);
        }
        Op::Abs(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a))
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            add_into(nodes, grads, *a, &d);
        }
        Op::Square(a) => {
            let d: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect();
            add_into(nodes, grads, *a, &d);
        }
        Op::Sum(a) => {
            let g0 = g[0];
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|v| *v += g0));
        }
        Op::Mean(a) => {
            let g0 = g[0] / nodes[a.0].value.numel() as f64;
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|v| *v += g0));
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            accumulate(nodes, grads, *a, |s| {
                kernels::gemm(m, n, k, g, false, val(*b), true, s, 1.0, 1.0)
            });
            accumulate(nodes, grads, *b, |s| {
                kernels::gemm(k, m, n, val(*a), true, g, false, s, 1.0, 1.0)
            });
        }
        Op::Relu(a) => {
            // subgradient 0 at the kink
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a))
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            add_into(nodes, grads, *a, &d);
        }
        Op::Reshape(a) => add_into(nodes, grads, *a, g),
        Op::Conv2d { x, w, geom, cols } => {
            if nodes[w.0].requires_grad {
                let dw = kernels::conv2d_backward_weight(geom, val(*x), cols, g);
                add_into(nodes, grads, *w, &dw);
            }
            if nodes[x.0].requires_grad {
                let dx = kernels::conv2d_backward_input(geom, val(*w), g);
                add_into(nodes, grads, *x, &dx);
            }
        }
        Op::Linear { x, w, b } => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let (n, fin, fout) = (sx[0], sx[1], sw[0]);
            accumulate(nodes, grads, *x, |s| {
                kernels::gemm(n, fout, fin, g, false, val(*w), false, s, 1.0, 1.0)
            });
            accumulate(nodes, grads, *w, |s| {
                kernels::gemm(fout, n, fin, g, true, val(*x), false, s, 1.0, 1.0)
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |s| {
                    for row in g.chunks(fout) {
                        for (a, d) in s.iter_mut().zip(row) {
                            *a += d;
                        }
                    }
                });
            }
        }
        Op::MaxPool { x, argmax } => {
            accumulate(nodes, grads, *x, |s| {
                for (&src, &d) in argmax.iter().zip(g) {
                    s[src] += d;
                }
            });
        }
        Op::AvgPool { x, k } => {
            let sh = nodes[x.0].value.shape();
            let dx = kernels::avgpool_backward(sh[0], sh[1], sh[2], sh[3], *k, g);
            add_into(nodes, grads, *x, &dx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let sh = nodes[x.0].value.shape();
            let (n, c) = (sh[0], sh[1]);
            let sp: usize = sh[2..].iter().product();
            let gam = val(*gamma);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * sp;
                    for j in base..base + sp {
                        dgamma[ch] += g[j] * xhat[j];
                        dbeta[ch] += g[j];
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let count = (n * sp) as f64;
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        let scale = gam[ch] * inv_std[ch];
                        for j in base..base + sp {
                            dx[j] = if *batch_stats {
                                scale * (g[j] - dbeta[ch] / count - xhat[j] * dgamma[ch] / count)
                            } else {
                                scale * g[j]
                            };
                        }
                    }
                }
                add_into(nodes, grads, *x, &dx);
            }
            add_into(nodes, grads, *gamma, &dgamma);
            add_into(nodes, grads, *beta, &dbeta);
        }
        Op::ChannelMean(x) => {
            let sh = nodes[x.0].value.shape();
            let (n, c) = (sh[0], sh[1]);
            let sp: usize = sh[2..].iter().product();
            let inv = 1.0 / (n * sp) as f64;
            accumulate(nodes, grads, *x, |s| {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        s[base..base + sp].iter_mut().for_each(|v| *v += g[ch] * inv);
                    }
                }
            });
        }
        Op::ChannelStd { x, mean } => {
            let sh = nodes[x.0].value.shape();
            let (n, c) = (sh[0], sh[1]);
            let sp: usize = sh[2..].iter().product();
            let inv = 1.0 / (n * sp) as f64;
            let std = nodes[i].value.data();
            let xv = val(*x);
            accumulate(nodes, grads, *x, |s| {
                for b in 0..n {
                    for ch in 0..c {
                        if std[ch] <= 0.0 {
                            continue;
                        }
                        let k = g[ch] * inv / std[ch];
                        let base = (b * c + ch) * sp;
                        for j in base..base + sp {
                            s[j] += k * (xv[j] - mean[ch]);
                        }
                    }
                }
            });
        }
        Op::FakeQuant { x, lo, hi } => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*x))
                .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                .collect();
            add_into(nodes, grads, *x, &d);
        }
        Op::Softmax(x) => {
            let p = nodes[i].value.data();
            let c = nodes[i].value.shape()[1];
            let mut d = vec![0.0; p.len()];
            for ((dr, pr), gr) in d.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                for j in 0..c {
                    dr[j] = pr[j] * (gr[j] - dot);
                }
            }
            add_into(nodes, grads, *x, &d);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let c = probs.len() / n;
            let k = g[0] / n as f64;
            accumulate(nodes, grads, *logits, |s| {
                for (row, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        s[row * c + j] += k * (probs[row * c + j] - onehot);
                    }
                }
            });
        }
        Op::TargetLogit { logits, labels } => {
            let n = labels.len();
            let c = nodes[logits.0].value.shape()[1];
            let k = g[0] / n as f64;
            accumulate(nodes, grads, *logits, |s| {
                for (row, &y) in labels.iter().enumerate() {
                    s[row * c + y] += k;
                }
            });
        }
        Op::SoftCrossEntropy {
            logits,
            target,
            temperature,
            probs,
        } => {
            let c = nodes[logits.0].value.shape()[1];
            let n = probs.len() / c;
            let k = g[0] * temperature / n as f64;
            accumulate(nodes, grads, *logits, |s| {
                for j in 0..probs.len() {
                    s[j] += k * (probs[j] - target[j]);
                }
            });
        }
    }
}
