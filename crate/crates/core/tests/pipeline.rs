//! Quantize → package → reload → fake-quant inference on small toy models.

use qvla_core::calibration::{capture_traces, robust_peak};
use qvla_core::package::{
    assemble_package, build_plans, forward_fakequant, load_package, quantize_model, ActScaling, QuantizeOptions, Solver,
};
use qvla_core::quant::QuantConfig;
use qvla_core::rotation::RotationKind;
use qvla_core::tensor::{decode_container, encode_container, DType};
use qvla_core::toy::{
    forward_fp32, generate, ActivationOutlierSpec, Branch, DriftSpec, GeneratedModel, NormSite, NormSource, OutlierSpec,
    ToyModelSpec,
};

fn small(seed: u64) -> ToyModelSpec {
    ToyModelSpec {
        dim: 64,
        llm_blocks: 1,
        dit_blocks: 2,
        tokens: 8,
        action_tokens: 8,
        steps: 8,
        calib_trajectories: 3,
        eval_trajectories: 2,
        outliers: vec![OutlierSpec { layer: "q0".into(), channels: vec![3], multiplier: 50.0 }],
        activation_outliers: vec![ActivationOutlierSpec {
            branch: Branch::Dit,
            site: NormSite::Attention,
            channels: vec![11],
            multiplier: 12.0,
        }],
        ..ToyModelSpec::with_seed(seed)
    }
}

fn opts(rotation: RotationKind) -> QuantizeOptions {
    QuantizeOptions { rotation, block_size: 32, ..QuantizeOptions::default() }
}

fn rel_err(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum();
    (num / den).sqrt()
}

#[test]
fn package_round_trip_is_bit_identical() {
    let m = generate(&small(1)).unwrap();
    let q = quantize_model(&m.graph, &m.calibration, &opts(RotationKind::SvdHadamard)).unwrap();
    let (map, manifest) = assemble_package(&q).unwrap();
    let bytes = encode_container(&map).unwrap();
    let back = load_package(&decode_container(&bytes).unwrap(), &m.graph).unwrap();
    for input in &m.evaluation {
        let a = forward_fakequant(&q, input).unwrap();
        let b = forward_fakequant(&back, input).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(manifest.layers.len(), m.graph.layers.len());
    assert!(map.keys().filter(|k| k.starts_with("w/")).all(|k| map[k].dtype() == DType::PackedI4));
    let solvers: Vec<Solver> = manifest.layers.iter().map(|l| l.solver).collect();
    assert!(solvers.contains(&Solver::Gptq) && solvers.contains(&Solver::Rtn));
}

#[test]
fn packaging_is_deterministic() {
    let run = || {
        let m = generate(&small(2)).unwrap();
        let q = quantize_model(&m.graph, &m.calibration, &opts(RotationKind::SvdHadamard)).unwrap();
        encode_container(&assemble_package(&q).unwrap().0).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn accounting_matches_tensor_bytes() {
    let m = generate(&small(3)).unwrap();
    let q = quantize_model(&m.graph, &m.calibration, &opts(RotationKind::Svd)).unwrap();
    let (map, manifest) = assemble_package(&q).unwrap();
    let a = manifest.accounting;
    let payload: u64 = map
        .values()
        .filter(|t| t.name() != "manifest.json")
        .map(|t| match t.dtype() {
            DType::PackedI4 => t.numel().div_ceil(2) as u64,
            _ => 4 * t.numel() as u64,
        })
        .sum();
    assert_eq!(a.total_bytes, payload);
    let params: u64 = m.graph.layers.iter().map(|l| l.params() as u64).sum();
    assert_eq!(a.baseline_fp16_bytes, 2 * params);
    assert!((a.savings - (1.0 - a.total_bytes as f64 / a.baseline_fp16_bytes as f64)).abs() < 1e-12);
}

#[test]
fn wide_bits_match_fp32() {
    let m = generate(&small(4)).unwrap();
    let wide = |rotation, act_scaling, percentile| QuantizeOptions {
        bits: QuantConfig::new(16, 16).unwrap(),
        act_scaling,
        percentile,
        ..opts(rotation)
    };
    let worst = |o: &QuantizeOptions, inputs: &[qvla_core::toy::TrajectoryInput]| {
        let q = quantize_model(&m.graph, &m.calibration, o).unwrap();
        inputs
            .iter()
            .map(|i| rel_err(&forward_fp32(&m.graph, i).unwrap().action, &forward_fakequant(&q, i).unwrap().action))
            .fold(0.0, f64::max)
    };
    for rotation in [RotationKind::Identity, RotationKind::SvdHadamard] {
        let e = worst(&wide(rotation, ActScaling::Dynamic, 99.9), &m.evaluation);
        assert!(e < 1e-3, "{rotation}: {e}");
    }
    // a full-range table reproduces its own calibration inputs
    let e = worst(&wide(RotationKind::Identity, ActScaling::PerStep, 100.0), &m.calibration);
    assert!(e < 1e-3, "{e}");
    // held-out inputs exceed the calibrated range, so static tables clip a little
    let e = worst(&wide(RotationKind::Identity, ActScaling::PerStep, 99.9), &m.evaluation);
    assert!(e < 2e-2, "{e}");
}

#[test]
fn four_bit_model_stays_close() {
    let m = generate(&small(5)).unwrap();
    let q = quantize_model(&m.graph, &m.calibration, &opts(RotationKind::SvdHadamard)).unwrap();
    let y = forward_fp32(&m.graph, &m.evaluation[0]).unwrap().action;
    let y_hat = forward_fakequant(&q, &m.evaluation[0]).unwrap().action;
    let e = rel_err(&y, &y_hat);
    assert!(e > 0.0 && e < 0.2, "{e}");
}

fn step_peaks(m: &GeneratedModel, layer: &str) -> Vec<f32> {
    let plans = build_plans(&m.graph, RotationKind::Identity, 32).unwrap();
    let traces = capture_traces(&m.graph, &m.calibration, &plans).unwrap();
    traces
        .steps(layer)
        .into_iter()
        .map(|t| robust_peak(traces.get(layer, t).unwrap().as_slice().unwrap(), 99.9).unwrap())
        .collect()
}

#[test]
fn adaln_inputs_drift_and_plain_inputs_stay_flat() {
    let m = generate(&ToyModelSpec { calib_trajectories: 4, ..small(6) }).unwrap();
    for l in m.graph.layers.iter().filter(|l| l.branch == Branch::Dit) {
        let peaks = step_peaks(&m, &l.id);
        let ratio = peaks[7] / peaks[0];
        match l.norm_source {
            NormSource::AdaLN => assert!((ratio - 0.8).abs() <= 0.05, "{}: {ratio}", l.id),
            NormSource::PlainLN => assert!((ratio - 1.0).abs() <= 0.02, "{}: {ratio}", l.id),
            NormSource::None => {}
        }
    }
}

#[test]
fn constant_gain_removes_most_drift() {
    let m = generate(&ToyModelSpec { drift: DriftSpec::none(), calib_trajectories: 4, ..small(6) }).unwrap();
    let peaks = step_peaks(&m, "dit.q0");
    let spread = peaks.iter().copied().fold(f32::MIN, f32::max) / peaks.iter().copied().fold(f32::MAX, f32::min);
    assert!(spread < 1.05, "{peaks:?}");
}
