mod common;

use common::quick_model;
use dfq_core::nn::evaluate;
use dfq_core::pipeline::{
    ablation_run, parse_steps, run_pipeline, toy_experiment, PipelineConfig, RunReport, Step,
    ToyLoss,
};
use dfq_core::DfqError;

/// Defaults with every optimization loop shortened so a run takes seconds.
fn fast(steps: &[Step], seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig {
        steps: steps.iter().copied().collect(),
        seed,
        ..PipelineConfig::default()
    };
    c.aac.iterations = 40;
    c.bns.iterations = 60;
    c.bns.batch_size = 16;
    c.fine_tune.epochs = 1;
    c.fine_tune.passes = 1;
    c.fine_tune.aac.iterations = 20;
    c.fine_tune.aac.batch_size = 16;
    c.fine_tune.bns.iterations = 20;
    c.fine_tune.bns.batch_size = 16;
    c
}

#[test]
fn steps_parse_and_order_is_enforced() {
    assert_eq!(parse_steps("clip,bn-adapt").unwrap(), [Step::Clip, Step::BnAdapt].into());
    assert_eq!(parse_steps("ft, clip").unwrap(), [Step::Clip, Step::FineTune].into());
    assert!(parse_steps("none").unwrap().is_empty());
    assert!(parse_steps("clip,prune").is_err());

    let (fp, val) = quick_model();
    let e = run_pipeline(fp, &fast(&[Step::BnAdapt], 0), Some(val)).unwrap_err();
    assert!(matches!(e, DfqError::Contract(_)), "{e}");
    assert!(e.to_string().contains("clip"));
    assert!(run_pipeline(fp, &fast(&[Step::FineTune], 0), None).is_err());
}

#[test]
fn no_steps_leaves_the_model_uncalibrated() {
    let (fp, val) = quick_model();
    let (qm, _) = run_pipeline(fp, &fast(&[], 0), None).unwrap();
    assert!(!qm.is_calibrated());
    assert!(matches!(evaluate(&qm, val), Err(DfqError::Uncalibrated { .. })));
    assert!(matches!(run_pipeline(fp, &fast(&[], 0), Some(val)), Err(DfqError::Uncalibrated { .. })));
}

#[test]
fn clipping_beats_wide_ranges_and_runs_reproduce() {
    let (fp, val) = quick_model();
    let (table, reports) = ablation_run(fp, val, &fast(&[], 0), &[3]).unwrap();
    let acc = |n: &str| table.row(n).unwrap().median;
    assert!(acc("clip") > acc("none"), "{}", table.summary());
    assert_eq!(reports.len(), 1);
    assert_eq!(table.row("clip+bn+ft").unwrap().accuracies.len(), 1);

    let (again, again_reports) = ablation_run(fp, val, &fast(&[], 0), &[3]).unwrap();
    assert_eq!(again, table);
    assert_eq!(again_reports[0].results, reports[0].results);
}

#[test]
fn fine_tuning_keeps_ranges_and_zero_epochs_is_a_no_op() {
    let (fp, val) = quick_model();
    let (two, _) = run_pipeline(fp, &fast(&[Step::Clip, Step::BnAdapt], 1), None).unwrap();

    let mut idle = fast(&[Step::Clip, Step::BnAdapt, Step::FineTune], 1);
    idle.fine_tune.epochs = 0;
    let (same, _) = run_pipeline(fp, &idle, None).unwrap();
    assert_eq!(same, two);

    let (tuned, _) = run_pipeline(fp, &fast(&[Step::Clip, Step::BnAdapt, Step::FineTune], 1), Some(val)).unwrap();
    assert_eq!(tuned.act_ranges(), two.act_ranges());
    for layer in 0..fp.layers.len() {
        assert_eq!(tuned.weight_quant(layer), two.weight_quant(layer));
    }
    assert_ne!(tuned.base(), two.base());
}

#[test]
fn report_json_round_trips_and_separates_timing() {
    let (fp, val) = quick_model();
    let (_, report) = run_pipeline(fp, &fast(&[Step::Clip, Step::BnAdapt], 2), Some(val)).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    let back: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["results"].get("timing").is_none());
    assert!(v["timing"]["two_step"].as_f64().unwrap() > 0.0);
    assert_eq!(v["results"]["config"]["bits"], 4);
    assert!(report.accuracy("clip").is_some() && report.accuracy("bn-adapt").is_some());
    assert!(report.accuracy("fine-tune").is_none());
    assert!(report.results.aac_quality.unwrap().is_finite());
}

#[test]
fn identity_model_shows_cross_entropy_saturation() {
    let abs = toy_experiment(ToyLoss::Abs, 10, 3, 300, 0.1, 0).unwrap();
    let ce = toy_experiment(ToyLoss::Ce, 10, 3, 300, 0.1, 0).unwrap();
    assert_eq!(abs.len(), 301);
    assert_eq!(ce.len(), 301);
    assert_eq!(abs[0].p_target, ce[0].p_target);
    let (pa, pc) = (abs[300].p_target, ce[300].p_target);
    assert!(pa >= 0.999 && pa > pc, "abs {pa} ce {pc}");
    // CE's push on the target logit is p − 1, which fades as p → 1.
    for w in ce.windows(2) {
        assert!(w[1].grad_target.abs() <= w[0].grad_target.abs());
    }
    assert!(abs.iter().all(|s| s.grad_target == abs[0].grad_target));

    let still = toy_experiment(ToyLoss::Ce, 10, 3, 0, 0.1, 0).unwrap();
    assert_eq!(still.len(), 1);
    assert!(toy_experiment(ToyLoss::Abs, 1, 0, 5, 0.1, 0).is_err());
    assert!(toy_experiment(ToyLoss::Abs, 4, 4, 5, 0.1, 0).is_err());
}
