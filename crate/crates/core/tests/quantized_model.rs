mod common;

use common::{quick_model, single_site_model};
use dfq_core::calibration::calibrate_activation_ranges;
use dfq_core::nn::{evaluate, model_forward, BnMode, Layer};
use dfq_core::quant::{
    decode_quant_model, encode_quant_model, load_quant_model, quantize_weights, save_quant_model,
    QuantParams, SiteKind,
};
use dfq_core::{DfqError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn calibrated(bits: u32) -> dfq_core::quant::QuantModel {
    let (fp, val) = quick_model();
    let qm = quantize_weights(fp, bits).unwrap();
    calibrate_activation_ranges(&qm, &[val.images.slice_batch(0, 32)]).unwrap().0
}

#[test]
fn eight_bit_weights_within_half_step() {
    let (fp, _) = quick_model();
    let qm = quantize_weights(fp, 8).unwrap();
    let mut checked = 0;
    for (i, layer) in fp.layers.iter().enumerate() {
        let Some(w) = layer.quantizable_weight() else { continue };
        let p = qm.weight_quant(i).unwrap();
        let (lo, hi) = w.min_max();
        assert_eq!((p.lower(), p.upper()), (lo as f64, hi as f64));
        let worst = w
            .data()
            .iter()
            .map(|&v| (p.fake_quant_value(v as f64) - v as f64).abs())
            .fold(0.0, f64::max);
        assert!(worst <= p.delta() / 2.0 + 1e-12, "layer {i}: {worst} > Δ/2");
        checked += 1;
    }
    assert_eq!(checked, 5);
}

#[test]
fn weights_on_the_grid_are_unchanged() {
    let w: Vec<f32> = (0..16).map(|i| i as f32).collect();
    let m = single_site_model(16, 1, 2, &w, &[1.0; 32]);
    let qm = quantize_weights(&m, 4).unwrap();
    let p = qm.weight_quant(0).unwrap();
    assert_eq!(p.delta(), 1.0);
    for &v in &w {
        assert_eq!(p.fake_quant_value(v as f64), v as f64);
    }
}

#[test]
fn sites_follow_relus() {
    let (fp, _) = quick_model();
    let qm = quantize_weights(fp, 4).unwrap();
    let relus: Vec<usize> = fp
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(qm.act_sites(), relus);
    assert!(relus.iter().all(|&i| qm.site_kind(i) == Some(SiteKind::PostRelu)));

    let res = dfq_core::nn::zoo::mini_resnet([3, 32, 32], 10, 0).unwrap();
    let q = quantize_weights(&res, 4).unwrap();
    let adds: Vec<usize> = res
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::ResidualAdd { .. }))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(adds.len(), 2);
    assert!(adds.iter().all(|&i| q.site_kind(i) == Some(SiteKind::Residual)));
}

#[test]
fn uncalibrated_evaluation_is_rejected() {
    let (fp, val) = quick_model();
    let qm = quantize_weights(fp, 4).unwrap();
    let e = evaluate(&qm, val).unwrap_err();
    assert!(matches!(e, DfqError::Uncalibrated { .. }), "{e}");
    assert!(e.to_string().contains("uncalibrated"));
}

#[test]
fn covering_range_at_eight_bits_tracks_full_precision() {
    // Grid-aligned weights leave activation rounding as the only error.
    let m = single_site_model(2, 1, 3, &[0.0, 1.0], &[1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
    let mut qm = quantize_weights(&m, 8).unwrap();
    qm.set_act_quant(1, QuantParams::new(0.0, 2.0, 8).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[64, 1, 1, 1], &mut rng).map(|v| v.abs().min(1.0));
    let fp = model_forward(&m, &x, BnMode::EvalStats, &[]).unwrap().logits;
    let q = qm.quantized_forward(&x, None, &[], false).unwrap().logits;
    assert!(fp.max_abs_diff(&q) < 1e-2, "{}", fp.max_abs_diff(&q));
}

#[test]
fn four_bit_probe_shifts_feature_statistics() {
    let (fp, val) = quick_model();
    let qm = calibrated(4);
    let batch = val.images.slice_batch(0, 64);
    // Output of the second convolution, whose input is already quantized.
    let site = 3;
    assert!(matches!(fp.layers[site], Layer::Conv2d(_)));
    let a = model_forward(fp, &batch, BnMode::EvalStats, &[site]).unwrap().probes[&site].clone();
    let b = qm.quantized_forward(&batch, None, &[site], false).unwrap().probes[&site].clone();
    let stats = |t: &Tensor| {
        let n = t.numel() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let v = t.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
    assert!((ma - mb).abs() > 1e-4 || (sa - sb).abs() > 1e-4);
    assert!(a.max_abs_diff(&b) > 1e-3);
}

#[test]
fn quant_model_file_round_trips() {
    let (_, val) = quick_model();
    let qm = calibrated(4);
    let back = decode_quant_model(&encode_quant_model(&qm)).unwrap();
    assert_eq!(back, qm);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.dfqm");
    save_quant_model(&qm, &path, false).unwrap();
    let loaded = load_quant_model(&path).unwrap();
    let batch = val.images.slice_batch(0, 16);
    let a = qm.quantized_forward(&batch, None, &[], false).unwrap().logits;
    let b = loaded.quantized_forward(&batch, None, &[], false).unwrap().logits;
    assert_eq!(a, b);
    let e = save_quant_model(&qm, &path, false).unwrap_err();
    assert!(matches!(e, DfqError::WouldOverwrite(_)));
    save_quant_model(&qm, &path, true).unwrap();
}

#[test]
fn damaged_quant_files_are_rejected() {
    let qm = calibrated(4);
    let bytes = encode_quant_model(&qm);
    assert!(decode_quant_model(&bytes[..bytes.len() - 5]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_quant_model(&extra).is_err());
    let plain = dfq_core::nn::io::encode_model(qm.base());
    let e = decode_quant_model(&plain).unwrap_err();
    assert!(matches!(e, DfqError::Format(_) | DfqError::Truncated(_)), "{e}");
}
