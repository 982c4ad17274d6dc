//! Subcommand bodies. Each reads explicit inputs and writes explicit outputs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use qvla_core::analyzer::{
    emit_report, layer_error, layer_errors_csv, magnitude_pipeline, sample_layers, step_gap_report,
    end_to_end_nmse, LayerErrorOptions, LayerErrorRecord, SurfaceSummary, Variant, PIPELINE,
};
use qvla_core::calibration::{build_table, capture_traces, single_bucket_table, DEFAULT_PERCENTILE};
use qvla_core::package::{
    assemble_package, build_plans, collect_layer_inputs, load_package, quantize_model, read_manifest,
    QuantizeOptions,
};
use qvla_core::rotation::RotationKind;
use qvla_core::tensor::{read_container, write_container, TensorMap};
use qvla_core::toy::{generate, inputs_for, LayerGraph, TrajectoryInput};
use qvla_core::QuantError;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{check_block_size, PipelineConfig, DEFAULT_BLOCK};

struct LoadedModel {
    graph: LayerGraph,
    calib: Vec<TrajectoryInput>,
    eval: Vec<TrajectoryInput>,
}

fn load_model(cfg: &PipelineConfig, path: &Path) -> anyhow::Result<LoadedModel> {
    let map = read_container(path).with_context(|| format!("reading model {}", path.display()))?;
    let mut graph = LayerGraph::from_tensors(&map).with_context(|| format!("loading model {}", path.display()))?;
    if let Some(steps) = cfg.steps {
        graph.spec.steps = steps;
    }
    if let Some(n) = cfg.trajectories {
        graph.spec.calib_trajectories = n;
        graph.spec.eval_trajectories = n;
    }
    graph.spec.validate()?;
    let (calib, eval) = inputs_for(&graph.spec);
    Ok(LoadedModel { graph, calib, eval })
}

fn layer_widths(graph: &LayerGraph) -> [usize; 2] {
    [graph.spec.dim, graph.spec.mlp_dim()]
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_map(path: &Path, map: &TensorMap) -> anyhow::Result<()> {
    write_container(map, path).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_toy(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let spec = cfg.toy_spec();
    let model = generate(&spec)?;
    write_map(out, &model.graph.to_tensors()?)?;
    println!(
        "wrote {} ({} linear layers, {} linear params)",
        out.display(),
        model.graph.layers.len(),
        model.graph.num_linear_params()
    );
    Ok(())
}

pub fn calibrate(
    cfg: &PipelineConfig,
    model: &Path,
    table_json: Option<&Path>,
    table_out: Option<&Path>,
    traces_out: Option<&Path>,
) -> anyhow::Result<()> {
    if table_json.is_none() && table_out.is_none() && traces_out.is_none() {
        return Err(QuantError::Config("calibrate needs --table-json, --table-out or --traces-out".into()).into());
    }
    let opts = cfg.quantize_options()?;
    let m = load_model(cfg, model)?;
    check_block_size(opts.rotation, opts.block_size, &layer_widths(&m.graph))?;
    let plans = build_plans(&m.graph, opts.rotation, opts.block_size)?;
    let traces = capture_traces(&m.graph, &m.calib, &plans)?;
    let table = build_table(&traces, opts.percentile, opts.bits.act_q_max())?;
    if let Some(p) = table_json {
        let mut text = serde_json::to_string_pretty(&table)?;
        text.push('\n');
        write_text(p, &text)?;
    }
    if let Some(p) = table_out {
        let map: TensorMap = table.to_tensors()?.into_iter().map(|t| (t.name().to_string(), t)).collect();
        write_map(p, &map)?;
    }
    if let Some(p) = traces_out {
        write_map(p, &traces.to_tensors()?)?;
    }
    println!(
        "calibrated {} layers x {} steps ({} scales)",
        table.layers().count(),
        m.graph.spec.steps,
        table.num_values()
    );
    Ok(())
}

pub fn quantize(cfg: &PipelineConfig, model: &Path, out: &Path) -> anyhow::Result<()> {
    let opts = cfg.quantize_options()?;
    let m = load_model(cfg, model)?;
    check_block_size(opts.rotation, opts.block_size, &layer_widths(&m.graph))?;
    let q = quantize_model(&m.graph, &m.calib, &opts)?;
    let (map, manifest) = assemble_package(&q)?;
    write_map(out, &map)?;
    let a = &manifest.accounting;
    println!(
        "wrote {}: {} bytes vs {} fp16 bytes, savings {:.4}",
        out.display(),
        a.total_bytes,
        a.baseline_fp16_bytes,
        a.savings
    );
    Ok(())
}

pub fn eval(
    cfg: &PipelineConfig,
    model: &Path,
    package: Option<&Path>,
    out: &Path,
    csv: Option<&Path>,
) -> anyhow::Result<()> {
    let m = load_model(cfg, model)?;
    let quantized = match package {
        Some(p) => {
            let map = read_container(p).with_context(|| format!("reading package {}", p.display()))?;
            read_manifest(&map)?;
            Some(load_package(&map, &m.graph)?)
        }
        None => None,
    };
    let opts: QuantizeOptions = match &quantized {
        Some(q) => QuantizeOptions { gptq: cfg.quantize_options()?.gptq, ..q.options },
        None => cfg.quantize_options()?,
    };
    let block = cfg.block_size.unwrap_or(if quantized.is_some() { opts.block_size } else { DEFAULT_BLOCK });
    let kinds = cfg.compare_kinds();
    for &k in &kinds {
        check_block_size(k, block, &layer_widths(&m.graph))?;
    }
    check_block_size(opts.rotation, opts.block_size, &layer_widths(&m.graph))?;

    let layers = match &cfg.layers {
        Some(ids) => {
            if let Some(bad) = ids.iter().find(|id| m.graph.layer(id).is_none()) {
                return Err(QuantError::Config(format!("unknown layer {bad}")).into());
            }
            ids.clone()
        }
        None => sample_layers(&m.graph, 5),
    };
    let inputs = collect_layer_inputs(&m.graph, &m.eval)?;
    let err_opts = LayerErrorOptions { bits: opts.bits, block_size: block, gptq: opts.gptq };
    let jobs: Vec<(&String, RotationKind)> = layers.iter().flat_map(|id| kinds.iter().map(move |&k| (id, k))).collect();
    let layer_errors: Vec<LayerErrorRecord> = jobs
        .par_iter()
        .map(|&(id, kind)| {
            let l = m.graph.layer(id).expect("layer ids checked");
            let variant = match &quantized {
                Some(_) => Variant::new(kind, opts.solver_for(l.branch)),
                None => Variant { rotation: kind, solver: None },
            };
            layer_error(id, inputs[id].view(), l.weight.view(), variant, &err_opts)
        })
        .collect::<Result<_, _>>()?;

    let surfaces: Vec<SurfaceSummary> = layers
        .par_iter()
        .map(|id| {
            let l = m.graph.layer(id).expect("layer ids checked");
            magnitude_pipeline(inputs[id].view(), l.weight.view(), &PIPELINE, block).map(|s| SurfaceSummary::new(id, s))
        })
        .collect::<Result<_, _>>()?;

    let plans = build_plans(&m.graph, opts.rotation, opts.block_size)?;
    let calib_traces = capture_traces(&m.graph, &m.calib, &plans)?;
    let heldout = capture_traces(&m.graph, &m.eval, &plans)?;
    let qa = opts.bits.act_q_max();
    let per_step = build_table(&calib_traces, opts.percentile, qa)?;
    let bucket = single_bucket_table(&calib_traces, opts.percentile, qa)?;
    let gaps = step_gap_report(&heldout, &per_step, &bucket, qa, Some(&m.graph))?;

    let mut e2e = BTreeMap::new();
    if let Some(q) = &quantized {
        e2e.insert("package".to_string(), end_to_end_nmse(q, &m.eval)?);
    }
    let accounting = match package {
        Some(p) => Some(read_manifest(&read_container(p)?)?.accounting),
        None => None,
    };
    let config = json!({
        "model": m.graph.spec,
        "quantized": quantized.is_some(),
        "bits": opts.bits,
        "rotation": opts.rotation,
        "block_size": opts.block_size,
        "compare_block_size": block,
        "act_scaling": opts.act_scaling,
        "percentile": opts.percentile,
        "default_percentile": DEFAULT_PERCENTILE,
        "llm_solver": opts.llm_solver,
        "dit_solver": opts.dit_solver,
        "gptq": opts.gptq,
        "compare": kinds,
        "layers": layers,
    });
    let monotone = surfaces.iter().filter(|s| s.monotone).count();
    let n_surfaces = surfaces.len();
    let mean_rel_gap = gaps.mean_rel_gap;
    if let Some(p) = csv {
        write_text(p, &layer_errors_csv(&layer_errors))?;
    }
    let text = emit_report(config, layer_errors, surfaces, Some(gaps), e2e.clone(), accounting)?;
    write_text(out, &text)?;
    println!(
        "wrote {}: monotone peaks on {monotone}/{n_surfaces} layers, mean per-step gap {mean_rel_gap:.4}{}",
        out.display(),
        e2e.get("package").map(|v| format!(", end-to-end nmse {v:.4e}")).unwrap_or_default()
    );
    Ok(())
}
