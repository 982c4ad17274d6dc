//! Runs the `qvla` binary against temporary directories.

use std::path::Path;
use std::process::{Command, Output};

use qvla_core::package::{forward_fakequant, load_package};
use qvla_core::tensor::read_container;
use qvla_core::toy::{forward_fp32, inputs_for, LayerGraph, ToyModelSpec};
use serde_json::Value;

fn qvla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qvla")).args(args).output().expect("spawn qvla")
}

fn ok(args: &[&str]) -> Output {
    let out = qvla(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn small_model(dir: &Path) -> String {
    let m = p(dir, "m.qtz");
    ok(&["gen-toy", "--seed", "3", "--dim", "64", "--llm-blocks", "1", "--dit-blocks", "1", "--tokens", "8",
        "--action-tokens", "4", "--trajectories", "2", "--out", &m]);
    m
}

fn json(path: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_toy_is_byte_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (p(d.path(), "a.qtz"), p(d.path(), "b.qtz"));
    ok(&["gen-toy", "--seed", "7", "--dim", "128", "--out", &a]);
    ok(&["gen-toy", "--seed", "7", "--dim", "128", "--out", &b]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn missing_out_is_a_usage_error() {
    assert_eq!(qvla(&["gen-toy", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(qvla(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn outlier_flag_is_echoed_in_spec() {
    let d = tempfile::tempdir().unwrap();
    let m = p(d.path(), "m.qtz");
    ok(&["gen-toy", "--dim", "64", "--outlier", "q0:3:50", "--out", &m]);
    let map = read_container(&m).unwrap();
    let spec: ToyModelSpec = serde_json::from_slice(map["spec.json"].as_bytes().unwrap()).unwrap();
    assert_eq!(spec.outliers.len(), 1);
    assert_eq!((spec.outliers[0].layer.as_str(), spec.outliers[0].channels.clone(), spec.outliers[0].multiplier), ("q0", vec![3], 50.0));
}

#[test]
fn calibrate_writes_tables_for_every_dit_layer_and_step() {
    let d = tempfile::tempdir().unwrap();
    let m = small_model(d.path());
    let (tj, tc) = (p(d.path(), "t.json"), p(d.path(), "t.qtz"));
    ok(&["calibrate", "--model", &m, "--table-json", &tj, "--table-out", &tc]);
    let table = json(&tj);
    let table = table.as_object().unwrap();
    assert_eq!(table.len(), 6);
    assert!(table.keys().all(|k| k.starts_with("dit.")));
    for steps in table.values() {
        let steps = steps.as_object().unwrap();
        assert_eq!(steps.keys().cloned().collect::<Vec<_>>(), (0..8).map(|t| t.to_string()).collect::<Vec<_>>());
        assert!(steps.values().all(|v| v.as_array().unwrap().len() == 64 || v.as_array().unwrap().len() == 256));
    }
    assert_eq!(read_container(&tc).unwrap().len(), 6 * 8);

    let one = p(d.path(), "one.json");
    ok(&["calibrate", "--model", &m, "--steps", "1", "--table-json", &one]);
    assert!(json(&one).as_object().unwrap().values().all(|s| s.as_object().unwrap().len() == 1));

    assert_eq!(qvla(&["calibrate", "--model", &m]).status.code(), Some(2));
}

#[test]
fn full_percentile_gives_channel_max_over_q_max() {
    let d = tempfile::tempdir().unwrap();
    let m = small_model(d.path());
    let (tj, tr) = (p(d.path(), "t.json"), p(d.path(), "tr.qtz"));
    ok(&["calibrate", "--model", &m, "--percentile", "100", "--table-json", &tj, "--traces-out", &tr]);
    let table = json(&tj);
    let traces = read_container(&tr).unwrap();
    for (layer, steps) in table.as_object().unwrap() {
        for (t, scales) in steps.as_object().unwrap() {
            let x = traces[&format!("trace/{layer}/step{t}")].to_matrix().unwrap();
            for (j, s) in scales.as_array().unwrap().iter().enumerate() {
                let peak = x.column(j).iter().fold(0.0f32, |a, v| a.max(v.abs()));
                let want = if peak > 0.0 { peak / 7.0 } else { 1.0 / 7.0 };
                assert!((s.as_f64().unwrap() as f32 - want).abs() <= 1e-6 * want, "{layer} step {t} channel {j}");
            }
        }
    }
}

#[test]
fn wide_identity_package_matches_fp32() {
    let d = tempfile::tempdir().unwrap();
    let m = small_model(d.path());
    let pkg = p(d.path(), "p.qtz");
    ok(&["quantize", "--model", &m, "--rotation", "none", "--bits", "16", "--act-scaling", "dynamic", "--out", &pkg]);
    let graph = LayerGraph::from_tensors(&read_container(&m).unwrap()).unwrap();
    let q = load_package(&read_container(&pkg).unwrap(), &graph).unwrap();
    let (_, eval) = inputs_for(&graph.spec);
    for input in &eval {
        let y = forward_fp32(&graph, input).unwrap().action;
        let y_hat = forward_fakequant(&q, input).unwrap().action;
        let num: f32 = (&y - &y_hat).iter().map(|v| v * v).sum();
        let den: f32 = y.iter().map(|v| v * v).sum();
        assert!((num / den).sqrt() < 1e-3);
    }
}

#[test]
fn bad_block_size_and_config_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let m = small_model(d.path());
    let out = p(d.path(), "x.qtz");
    let r = qvla(&["quantize", "--model", &m, "--block-size", "48", "--out", &out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("block size"));
    assert_eq!(qvla(&["quantize", "--model", &m, "--rotation", "svd", "--block-size", "128", "--out", &out]).status.code(), Some(2));

    let cfg = p(d.path(), "bad.json");
    std::fs::write(&cfg, r#"{"sed": 1}"#).unwrap();
    assert_eq!(qvla(&["--config", &cfg, "gen-toy", "--out", &out]).status.code(), Some(2));
    assert_eq!(qvla(&["quantize", "--model", &m, "--bits", "1", "--out", &out]).status.code(), Some(2));
    let r = Command::new(env!("CARGO_BIN_EXE_qvla"))
        .env("QVLA_THREADS", "0")
        .args(["gen-toy", "--out", &out])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let r = qvla(&["quantize", "--model", &p(d.path(), "nope.qtz"), "--out", &p(d.path(), "x.qtz")]);
    assert_eq!(r.status.code(), Some(1));
    std::fs::write(d.path().join("junk.qtz"), b"not a container").unwrap();
    let r = qvla(&["eval", "--model", &p(d.path(), "junk.qtz"), "--out", &p(d.path(), "r.json")]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = p(d.path(), "c.json");
    std::fs::write(&cfg, r#"{"seed": 5, "dim": 64, "llm_blocks": 1, "dit_blocks": 1, "tokens": 4, "action_tokens": 4}"#).unwrap();
    let (a, b) = (p(d.path(), "a.qtz"), p(d.path(), "b.qtz"));
    ok(&["--config", &cfg, "gen-toy", "--out", &a]);
    ok(&["--config", &cfg, "gen-toy", "--seed", "6", "--out", &b]);
    let spec = |f: &str| -> ToyModelSpec {
        serde_json::from_slice(read_container(f).unwrap()["spec.json"].as_bytes().unwrap()).unwrap()
    };
    assert_eq!((spec(&a).seed, spec(&a).dim), (5, 64));
    assert_eq!((spec(&b).seed, spec(&b).dim), (6, 64));
}

#[test]
fn eval_reports_on_packages_and_on_the_model_alone() {
    let d = tempfile::tempdir().unwrap();
    let m = small_model(d.path());
    let pkg = p(d.path(), "p.qtz");
    ok(&["quantize", "--model", &m, "--out", &pkg]);
    let (r, csv) = (p(d.path(), "r.json"), p(d.path(), "r.csv"));
    ok(&["eval", "--model", &m, "--package", &pkg, "--compare", "identity,svd,svd-hadamard", "--out", &r, "--csv", &csv]);
    let report = json(&r);
    let errors = report["layer_errors"].as_array().unwrap();
    let layers: Vec<&str> = report["config"]["layers"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    // one block per branch has four norm-fed layers
    assert_eq!(layers.len(), 8);
    for l in &layers {
        let variants: Vec<&str> = errors
            .iter()
            .filter(|e| e["layer_id"] == *l)
            .map(|e| e["variant"]["rotation"].as_str().unwrap())
            .collect();
        assert_eq!(variants, ["identity", "svd", "svd-hadamard"]);
    }
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + errors.len());
    let surfaces = report["surfaces"].as_array().unwrap();
    assert!(surfaces.iter().all(|s| s["peaks"].as_array().unwrap().len() == 4));
    assert!(!report["step_gaps"]["entries"].as_array().unwrap().is_empty());
    assert!(report["end_to_end_nmse"]["package"].as_f64().unwrap() > 0.0);
    assert!(report["accounting"]["total_bytes"].as_u64().unwrap() > 0);

    let alone = p(d.path(), "alone.json");
    ok(&["eval", "--model", &m, "--compare", "identity", "--out", &alone]);
    let report = json(&alone);
    for e in report["layer_errors"].as_array().unwrap() {
        assert_eq!((e["rel_output_error"].as_f64(), e["nmse"].as_f64()), (Some(0.0), Some(0.0)));
    }
    assert!(report["end_to_end_nmse"].as_object().unwrap().is_empty());

    let bad = qvla(&["eval", "--model", &m, "--layers", "llm.zz9", "--out", &alone]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    assert!(qvla(&["--help"]).status.success());
    assert!(qvla(&["quantize", "--help"]).status.success());
}
