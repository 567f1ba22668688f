//! Finite-difference cases covering every differentiable tape operation and
//! every synthesis loss.

use dfq_core::autograd::{finite_diff_check, Tape, Var};
use dfq_core::nn::loss::{abs_loss, bns_loss, ce_loss, mae_loss, mse_loss};
use dfq_core::nn::{BnInputStats, BnStats};
use dfq_core::quant::QuantParams;
use dfq_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;

/// Standard-normal tensor with every entry at least `margin` away from zero.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - v.abs() } else { margin + v.abs() };
        }
    }
    t
}

/// Contract an arbitrary-shape output with fixed random weights, so every
/// output element contributes a distinct amount to the scalar.
fn weigh(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(&shape, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// `(name, max relative error)` for every case.
pub fn gradient_cases(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor| {
        out.push((name.to_string(), finite_diff_check(f, x, EPS)));
    };

    let a = Tensor::randn(&[3, 4], &mut rng);
    let b = Tensor::randn(&[3, 4], &mut rng);
    let bv = b.clone();
    check("add", &|t, x| { let c = t.constant(bv.clone()); let y = t.add(x, c)?; weigh(t, y, 1) }, &a);
    check("sub", &|t, x| { let c = t.constant(bv.clone()); let y = t.sub(c, x)?; weigh(t, y, 2) }, &a);
    check("mul", &|t, x| { let c = t.constant(bv.clone()); let y = t.mul(x, c)?; weigh(t, y, 3) }, &a);
    check("mul-self", &|t, x| { let y = t.mul(x, x)?; weigh(t, y, 4) }, &a);
    check("scale", &|t, x| { let y = t.scale(x, -2.5)?; weigh(t, y, 5) }, &a);
    let nz = away_from_zero(&[3, 4], 0.1, &mut rng);
    check("abs", &|t, x| { let y = t.abs(x)?; weigh(t, y, 6) }, &nz);
    check("square", &|t, x| { let y = t.square(x)?; weigh(t, y, 7) }, &a);
    check("sum", &|t, x| { let y = t.square(x)?; t.sum(y) }, &a);
    check("mean", &|t, x| { let y = t.square(x)?; t.mean(y) }, &a);
    check("relu", &|t, x| { let y = t.relu(x)?; weigh(t, y, 8) }, &nz);
    check("reshape", &|t, x| { let y = t.reshape(x, vec![2, 6])?; weigh(t, y, 9) }, &a);

    let m = Tensor::randn(&[4, 5], &mut rng);
    let (av, mv) = (a.clone(), m.clone());
    check("matmul-lhs", &|t, x| { let c = t.constant(mv.clone()); let y = t.matmul(x, c)?; weigh(t, y, 10) }, &a);
    check("matmul-rhs", &|t, x| { let c = t.constant(av.clone()); let y = t.matmul(c, x)?; weigh(t, y, 11) }, &m);

    let lw = Tensor::randn(&[5, 4], &mut rng);
    let lb = Tensor::randn(&[5], &mut rng);
    let (lwv, lbv, av2) = (lw.clone(), lb.clone(), a.clone());
    check("linear-input", &|t, x| {
        let (w, bb) = (t.constant(lwv.clone()), t.constant(lbv.clone()));
        let y = t.linear(x, w, Some(bb))?;
        weigh(t, y, 12)
    }, &a);
    check("linear-weight", &|t, w| {
        let (x, bb) = (t.constant(av2.clone()), t.constant(lbv.clone()));
        let y = t.linear(x, w, Some(bb))?;
        weigh(t, y, 13)
    }, &lw);
    let (lwv2, av3) = (lw.clone(), a.clone());
    check("linear-bias", &|t, bb| {
        let (x, w) = (t.constant(av3.clone()), t.constant(lwv2.clone()));
        let y = t.linear(x, w, Some(bb))?;
        weigh(t, y, 14)
    }, &lb);

    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        let img = Tensor::randn(&[2, 2, 5, 5], &mut rng);
        let ker = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let (kv, iv) = (ker.clone(), img.clone());
        check(&format!("conv2d-input-s{stride}p{padding}"), &|t, x| {
            let w = t.constant(kv.clone());
            let y = t.conv2d(x, w, stride, padding)?;
            weigh(t, y, 15)
        }, &img);
        check(&format!("conv2d-weight-s{stride}p{padding}"), &|t, w| {
            let x = t.constant(iv.clone());
            let y = t.conv2d(x, w, stride, padding)?;
            weigh(t, y, 16)
        }, &ker);
    }

    let fmap = Tensor::randn(&[2, 3, 4, 4], &mut rng);
    check("maxpool", &|t, x| { let y = t.maxpool(x, 2)?; weigh(t, y, 17) }, &fmap);
    check("avgpool", &|t, x| { let y = t.avgpool(x, 2)?; weigh(t, y, 18) }, &fmap);
    check("channel-mean", &|t, x| { let y = t.channel_mean(x)?; weigh(t, y, 19) }, &fmap);
    check("channel-std", &|t, x| { let y = t.channel_std(x)?; weigh(t, y, 20) }, &fmap);

    let gamma = Tensor::new(vec![3], vec![0.7, 1.3, -0.4]).unwrap();
    let beta = Tensor::new(vec![3], vec![0.1, -0.2, 0.5]).unwrap();
    let (mean, std) = (vec![0.2, -0.1, 0.05], vec![0.9, 1.4, 0.6]);
    for batch_stats in [false, true] {
        let tag = if batch_stats { "batch" } else { "fixed" };
        let (mean, std) = (mean.clone(), std.clone());
        let bn = move |t: &mut Tape, x: Var, g: Var, b: Var| -> Result<Var> {
            if batch_stats {
                Ok(t.batchnorm_batch(x, g, b, 1e-5)?.0)
            } else {
                t.batchnorm_fixed(x, g, b, &mean, &std, 1e-5)
            }
        };
        let (gv, bv, fv) = (gamma.clone(), beta.clone(), fmap.clone());
        check(&format!("batchnorm-{tag}-input"), &|t, x| {
            let (g, b) = (t.constant(gv.clone()), t.constant(bv.clone()));
            let y = bn(t, x, g, b)?;
            weigh(t, y, 21)
        }, &fmap);
        check(&format!("batchnorm-{tag}-gamma"), &|t, g| {
            let (x, b) = (t.constant(fv.clone()), t.constant(bv.clone()));
            let y = bn(t, x, g, b)?;
            weigh(t, y, 22)
        }, &gamma);
        let (gv2, fv2) = (gamma.clone(), fmap.clone());
        check(&format!("batchnorm-{tag}-beta"), &|t, b| {
            let (x, g) = (t.constant(fv2.clone()), t.constant(gv2.clone()));
            let y = bn(t, x, g, b)?;
            weigh(t, y, 23)
        }, &beta);
    }

    let logits = Tensor::randn(&[4, 5], &mut rng);
    let labels = [0usize, 3, 1, 4];
    check("softmax", &|t, x| { let y = t.softmax(x)?; weigh(t, y, 24) }, &logits);
    check("cross-entropy", &|t, x| t.cross_entropy(x, &labels), &logits);
    check("target-logit-mean", &|t, x| { let y = t.target_logit_mean(x, &labels)?; t.scale(y, 1.7) }, &logits);
    let soft = {
        let raw = Tensor::randn(&[4, 5], &mut rng).map(f64::exp);
        let mut d = raw.into_data();
        for row in d.chunks_mut(5) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![4, 5], d).unwrap()
    };
    check("soft-cross-entropy", &|t, x| t.soft_cross_entropy(x, &soft, 4.0), &logits);

    // Straight-through estimator: inside the range the backward pass is the
    // derivative of the clamp envelope, which finite differences can see.
    let p = QuantParams::new(-1.5, 2.0, 4).unwrap();
    let inside = {
        let mut v: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.3..1.8)).collect();
        v.extend([-2.5, 3.1]);
        Tensor::new(vec![14], v).unwrap()
    };
    let ste = dfq_core::autograd::analytic_grad(
        &|t: &mut Tape, x: Var| { let y = t.fake_quant(x, &p)?; weigh(t, y, 25) },
        &inside,
    )
    .unwrap();
    let envelope = dfq_core::autograd::analytic_grad(
        &|t: &mut Tape, x: Var| {
            // clamp(x, l, u) = l + relu(x − l) − relu(x − u)
            let lo = t.constant(Tensor::full(&[14], p.lower()));
            let hi = t.constant(Tensor::full(&[14], p.upper()));
            let a = t.sub(x, lo)?;
            let a = t.relu(a)?;
            let b = t.sub(x, hi)?;
            let b = t.relu(b)?;
            let d = t.sub(a, b)?;
            let y = t.add(d, lo)?;
            weigh(t, y, 25)
        },
        &inside,
    )
    .unwrap();
    let clamp_fd = finite_diff_check(
        |t: &mut Tape, x: Var| {
            let lo = t.constant(Tensor::full(&[14], p.lower()));
            let hi = t.constant(Tensor::full(&[14], p.upper()));
            let a = t.sub(x, lo)?;
            let a = t.relu(a)?;
            let b = t.sub(x, hi)?;
            let b = t.relu(b)?;
            let d = t.sub(a, b)?;
            let y = t.add(d, lo)?;
            weigh(t, y, 25)
        },
        &inside,
        EPS,
    );
    let ste_err = ste
        .data()
        .iter()
        .zip(envelope.data())
        .map(|(a, b)| (a - b).abs() / (b.abs() + 1e-8))
        .fold(clamp_fd, f64::max);
    out.push(("fake-quant-ste".into(), ste_err));

    let mut check = |name: &str, f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor| {
        out.push((name.to_string(), finite_diff_check(f, x, EPS)));
    };
    check("loss-ce", &|t, x| ce_loss(t, x, &labels), &logits);
    check("loss-abs", &|t, x| abs_loss(t, x, &labels), &logits);
    check("loss-mae", &|t, x| mae_loss(t, x, &labels), &logits);
    check("loss-mse", &|t, x| mse_loss(t, x, &labels), &logits);
    let stored = [
        BnStats { mean: vec![0.3, -0.2, 0.1], std: vec![1.2, 0.8, 0.5], eps: 1e-5 },
        BnStats { mean: vec![-0.5, 0.4], std: vec![0.7, 1.1], eps: 1e-5 },
    ];
    let proj = Tensor::randn(&[2, 3, 1, 1], &mut rng);
    check("loss-bns", &|t, x| {
        // Two "layers": the input itself and a 1x1 projection of its ReLU.
        let m1 = t.channel_mean(x)?;
        let s1 = t.channel_std(x)?;
        let r = t.relu(x)?;
        let w = t.constant(proj.clone());
        let h = t.conv2d(r, w, 1, 0)?;
        let m2 = t.channel_mean(h)?;
        let s2 = t.channel_std(h)?;
        let batch = [
            BnInputStats { layer: 0, mean: m1, std: s1 },
            BnInputStats { layer: 1, mean: m2, std: s2 },
        ];
        bns_loss(t, &batch, &stored)
    }, &away_from_zero(&[3, 3, 3, 3], 0.05, &mut rng));
    out
}
