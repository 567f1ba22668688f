//! End-to-end acceptance run: one `PASS`/`FAIL` line per criterion on
//! stdout, measurements on stderr.
//!
//! Trains the default full-precision desk model first (about a minute and a
//! half on one core); the whole run takes roughly half an hour. By default the
//! process exits 0 once every criterion has been evaluated, so a failing
//! criterion is reported without breaking the workspace test run. Set
//! `DFQ_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

mod common;

use std::time::Instant;

use dfq_core::autograd::{analytic_grad, Tape, Var};
use dfq_core::calibration::{adapt_bn_statistics, calibrate_activation_ranges, MomentumPolicy};
use dfq_core::data::{make_desk_dataset, Dataset, DeskDatasetConfig};
use dfq_core::nn::loss::{abs_loss, ce_loss};
use dfq_core::nn::io::{decode_model, encode_model};
use dfq_core::nn::{load_model, save_model, train_fp, zoo, ModelGraph, TrainConfig};
use dfq_core::pipeline::{
    ablation_run, clip_sweep_run, loss_study_run, median, run_pipeline, toy_experiment,
    PipelineConfig, Step, ToyLoss,
};
use dfq_core::quant::{compute_delta, quantize_weights, QuantParams};
use dfq_core::synthesis::{generate_aac_batch, generate_bns_batch, LossKind, SynthesisConfig};
use dfq_core::Tensor;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Validation accuracy of the default model on this dataset split.
const PINNED_FP_ACCURACY: f64 = 90.5;

type Outcome = Result<String, String>;

struct Desk {
    fp: ModelGraph,
    train: Dataset,
    val: Dataset,
}

fn desk() -> Desk {
    let data = make_desk_dataset(&DeskDatasetConfig::default()).unwrap();
    let (train, val) = data.split_tail(1000).unwrap();
    let m = zoo::tiny_block_net([3, 32, 32], 10, 0).unwrap();
    let started = Instant::now();
    let (fp, report) = train_fp(m, &train, Some(&val), &TrainConfig::default()).unwrap();
    let acc = report.val_accuracy.unwrap();
    eprintln!(
        "full-precision model: {acc:.2}% (pinned {PINNED_FP_ACCURACY} ± 2) in {:.0?}",
        started.elapsed()
    );
    Desk { fp, train, val }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(started: Instant, limit_s: f64) -> (bool, String) {
    let s = started.elapsed().as_secs_f64();
    (s < limit_s, format!("{s:.1}s of {limit_s:.0}s"))
}

fn quantizer_exactness() -> Outcome {
    let started = Instant::now();
    if compute_delta(0.0, 15.0, 4).map_err(|e| e.to_string())? != 1.0 {
        return Err("Δ(0, 15, 4) ≠ 1".into());
    }
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (-100.0f64..100.0, 1e-3f64..200.0, 2u32..=8, 0.0f64..=1.0, -1e4f64..1e4);
    runner
        .run(&strategy, |(l, w, b, t, far)| {
            let u = l + w;
            let p = QuantParams::new(l, u, b).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let levels = ((1u32 << b) - 1) as f64;
            if p.delta() != (u - l) / levels {
                return Err(TestCaseError::fail(format!("Δ mismatch at ({l}, {u}, {b})")));
            }
            // Integer-friendly ranges have an exact unit step.
            let unit = QuantParams::new(l.round(), l.round() + levels, b).unwrap();
            if unit.delta() != 1.0 {
                return Err(TestCaseError::fail(format!("unit Δ at ({}, {b})", l.round())));
            }
            let x = l + t * w;
            let err = (p.dequantize_code(p.quantize_value(x)) - x).abs();
            if err > p.delta() / 2.0 * (1.0 + 1e-9) {
                return Err(TestCaseError::fail(format!("round trip {err} > Δ/2 at x={x}")));
            }
            if p.quantize_value(x) > p.max_code() || p.quantize_value(far) > p.max_code() {
                return Err(TestCaseError::fail("code out of range".to_string()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let (fast, time) = within(started, 5.0);
    check(fast, format!("10000 cases, {time}"))
}

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for seed in 0..3 {
        for (name, err) in common::grad_cases::gradient_cases(seed) {
            count += 1;
            if !(err <= worst.1) {
                worst = (name, err);
            }
        }
    }
    let (fast, time) = within(started, 30.0);
    check(
        worst.1 <= 1e-4 && fast,
        format!("{count} cases, worst {} at {:.2e}, {time}", worst.0, worst.1),
    )
}

fn target_logit_gradients() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut ce_err, mut abs_err) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let z = Tensor::randn(&[1, 10], &mut rng).map(|v| 3.0 * v);
        let y = i % 10;
        let ce = |t: &mut Tape, x: Var| ce_loss(t, x, &[y]);
        let abs = |t: &mut Tape, x: Var| abs_loss(t, x, &[y]);
        let g_ce = analytic_grad(&ce, &z).ok_or("no CE gradient")?;
        let g_abs = analytic_grad(&abs, &z).ok_or("no ABS gradient")?;
        let zmax = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.data().iter().map(|v| (v - zmax).exp()).sum();
        let p = (z.data()[y] - zmax).exp() / denom;
        ce_err = ce_err.max((g_ce.data()[y] - (p - 1.0)).abs());
        abs_err = abs_err.max((g_abs.data()[y] + 1.0).abs());
    }
    let (fast, time) = within(started, 1.0);
    check(
        ce_err <= 1e-8 && abs_err <= 1e-8 && fast,
        format!("CE max error {ce_err:.1e}, ABS max error {abs_err:.1e}, {time}"),
    )
}

fn toy() -> Outcome {
    let started = Instant::now();
    let lr = 0.1;
    let abs = toy_experiment(ToyLoss::Abs, 10, 3, 300, lr, 0).map_err(|e| e.to_string())?;
    let ce = toy_experiment(ToyLoss::Ce, 10, 3, 300, lr, 0).map_err(|e| e.to_string())?;
    let (pa, pc) = (abs[300].p_target, ce[300].p_target);
    let monotone = ce
        .windows(2)
        .all(|w| (w[1].p_target - 1.0).abs() <= (w[0].p_target - 1.0).abs());
    let (fast, time) = within(started, 5.0);
    check(
        pa >= 0.999 && pa > pc && monotone && fast,
        format!("final p_target abs {pa:.5} ce {pc:.5}, CE |p−1| non-increasing: {monotone}, {time}"),
    )
}

fn loss_selection(d: &Desk) -> Outcome {
    let started = Instant::now();
    let table = loss_study_run(&d.fp, &d.val, 4, &SynthesisConfig::aac(), &SEEDS)
        .map_err(|e| e.to_string())?;
    eprint!("{}", table.summary());
    let abs = table.row(LossKind::Abs).unwrap();
    let others: Vec<_> = table.rows.iter().filter(|r| r.loss != LossKind::Abs).collect();
    let lowest_ce = others.iter().all(|r| abs.median_ce < r.median_ce);
    let best_acc = others.iter().all(|r| abs.median_accuracy > r.median_accuracy);
    let (fast, time) = within(started, 600.0);
    check(
        lowest_ce && best_acc && fast,
        format!(
            "abs CE {:.3} lowest: {lowest_ce}; abs accuracy {:.2}% highest: {best_acc}; {time}",
            abs.median_ce, abs.median_accuracy
        ),
    )
}

/// Ablation ordering, plus the two-step/three-step timing ratio of its runs.
fn ablation(d: &Desk) -> (Outcome, Outcome) {
    let started = Instant::now();
    let (table, reports) = match ablation_run(&d.fp, &d.val, &PipelineConfig::default(), &SEEDS) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    eprint!("{}", table.summary());
    let m = |n: &str| table.row(n).unwrap().median;
    let (none, clip, bn, ft) = (m("none"), m("clip"), m("clip+bn"), m("clip+bn+ft"));
    let (fast, time) = within(started, 1800.0);
    let order = check(
        none < clip && clip <= bn && bn <= ft && clip - none >= 5.0 && fast,
        format!("none {none:.2} < clip {clip:.2} ≤ clip+bn {bn:.2} ≤ clip+bn+ft {ft:.2}; {time}"),
    );
    let ratios: Vec<f64> = reports
        .iter()
        .map(|r| r.timing.two_step / r.timing.three_step)
        .collect();
    let reported = reports
        .iter()
        .all(|r| r.timing.two_step > 0.0 && r.timing.three_step > r.timing.two_step);
    let ratio = median(&ratios);
    let timing = check(
        ratio < 0.1 && reported,
        format!(
            "two-step / three-step median {:.1}% (range {:.1}–{:.1}%)",
            100.0 * ratio,
            100.0 * ratios.iter().cloned().fold(f64::INFINITY, f64::min),
            100.0 * ratios.iter().cloned().fold(0.0, f64::max)
        ),
    );
    (order, timing)
}

fn eight_bit(d: &Desk) -> Outcome {
    let started = Instant::now();
    let cfg = PipelineConfig {
        bits: 8,
        steps: [Step::Clip, Step::BnAdapt, Step::FineTune].into(),
        ..PipelineConfig::default()
    };
    let (_, r) = run_pipeline(&d.fp, &cfg, Some(&d.val)).map_err(|e| e.to_string())?;
    let fp = r.results.fp_accuracy.unwrap();
    let bn = r.accuracy("bn-adapt").unwrap();
    let ft = r.accuracy("fine-tune").unwrap();
    let (fast, time) = within(started, 600.0);
    check(
        (bn - fp).abs() <= 1.0 && (ft - bn).abs() < 1.0 && fast,
        format!("fp {fp:.2}, clip+bn {bn:.2}, fine-tuned {ft:.2}; {time}"),
    )
}

fn sweep(d: &Desk) -> Outcome {
    let started = Instant::now();
    let (_, run) = clip_sweep_run(&d.fp, &PipelineConfig::default(), &d.val, 101, 1.5)
        .map_err(|e| e.to_string())?;
    let r = &run.report;
    for s in &r.sites {
        eprintln!(
            "  {:<16} aac u {:>7.3}  sweep u {:>7.3}  step {:.3}",
            s.name, s.aac_upper, s.chosen_upper, s.grid_step
        );
    }
    let agreement = r.aac_agreement();
    let (fast, time) = within(started, 1200.0);
    check(
        r.sweep_accuracy >= r.aac_accuracy && agreement >= 0.7 && fast,
        format!(
            "sweep {:.2}% ≥ aac {:.2}%; aac within one step at {:.0}% of {} sites; {time}",
            r.sweep_accuracy,
            r.aac_accuracy,
            100.0 * agreement,
            r.sites.len()
        ),
    )
}

fn bn_control(d: &Desk) -> Outcome {
    let started = Instant::now();
    let bns = generate_bns_batch(&d.fp, &SynthesisConfig::bns()).map_err(|e| e.to_string())?;
    let weights = quantize_weights(&d.fp, 4).map_err(|e| e.to_string())?;
    let batches = [bns.images];
    let (_, control) = adapt_bn_statistics(&weights.with_quantization_disabled(), &batches, MomentumPolicy::Replace)
        .map_err(|e| e.to_string())?;
    let aac = generate_aac_batch(&d.fp, &SynthesisConfig::aac()).map_err(|e| e.to_string())?;
    let (clipped, _) = calibrate_activation_ranges(&weights, &[aac.images]).map_err(|e| e.to_string())?;
    let (_, quantized) =
        adapt_bn_statistics(&clipped, &batches, MomentumPolicy::Replace).map_err(|e| e.to_string())?;
    let worst = control.iter().map(|s| s.relative_shift).fold(0.0, f64::max);
    let mean_shift = |v: &[dfq_core::calibration::BnShift]| {
        v.iter().map(|s| s.mean_abs_shift).sum::<f64>() / v.len() as f64
    };
    let (c, q) = (mean_shift(&control), mean_shift(&quantized));
    let (fast, time) = within(started, 300.0);
    check(
        worst < 0.01 && q > c && fast,
        format!(
            "control worst relative shift {:.3}%; mean per-channel shift control {c:.4} vs 4-bit {q:.4}; {time}",
            100.0 * worst
        ),
    )
}

fn determinism(d: &Desk) -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model_path = dir.path().join("fp.dfqm");
    save_model(&d.fp, &model_path, false).map_err(|e| e.to_string())?;
    let loaded = load_model(&model_path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&model_path).map_err(|e| e.to_string())?;
    let model_ok = loaded == d.fp
        && encode_model(&loaded) == bytes
        && decode_model(&bytes).map_err(|e| e.to_string())? == d.fp;

    let data_path = dir.path().join("train.dfqd");
    d.train.save(&data_path, false).map_err(|e| e.to_string())?;
    let back = Dataset::load(&data_path).map_err(|e| e.to_string())?;
    let data_ok = back == d.train
        && back.encode() == std::fs::read(&data_path).map_err(|e| e.to_string())?;

    let mut cfg = PipelineConfig {
        seed: 11,
        ..PipelineConfig::default()
    };
    cfg.aac.iterations = 50;
    cfg.bns.iterations = 100;
    let (qa, a) = run_pipeline(&d.fp, &cfg, Some(&d.val)).map_err(|e| e.to_string())?;
    let (qb, b) = run_pipeline(&d.fp, &cfg, Some(&d.val)).map_err(|e| e.to_string())?;
    let json = |r: &dfq_core::pipeline::RunResults| serde_json::to_string(r).unwrap();
    let runs_ok = qa == qb && a.results == b.results && json(&a.results) == json(&b.results);
    let (fast, time) = within(started, 60.0);
    check(
        model_ok && data_ok && runs_ok && fast,
        format!("model file {model_ok}, dataset file {data_ok}, repeated run {runs_ok}; {time}"),
    )
}

fn main() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = vec![
        (1, "quantizer exactness", quantizer_exactness()),
        (2, "gradient oracle", gradient_oracle()),
        (3, "target-logit gradients", target_logit_gradients()),
        (4, "identity-model toy experiment", toy()),
    ];
    let d = desk();
    outcomes.push((5, "loss selection", loss_selection(&d)));
    let (order, timing) = ablation(&d);
    outcomes.push((6, "ablation ordering", order));
    outcomes.push((7, "8-bit parity", eight_bit(&d)));
    outcomes.push((8, "clipping sweep", sweep(&d)));
    outcomes.push((9, "adaptive batch-norm control", bn_control(&d)));
    outcomes.push((10, "two-step timing", timing));
    outcomes.push((11, "determinism and formats", determinism(&d)));

    let mut failed = 0;
    for (n, name, outcome) in &outcomes {
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 && std::env::var_os("DFQ_ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
        std::process::exit(1);
    }
}
