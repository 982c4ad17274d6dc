//! End-to-end quantization of a toy model and the deployable `.qtz` package.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{build_table, capture_traces, single_bucket_table, ScaleTable, DEFAULT_PERCENTILE};
use crate::error::{QuantError, Result};
use crate::gptq::{gptq_quantize, GptqConfig, HessianAccumulator};
use crate::quant::{fake_quant_linear, rtn_quantize, ActivationScaleMode, QuantConfig, QuantizedLayer};
use crate::rotation::{RotationKind, RotationPlan};
use crate::tensor::{get, insert_unique, DType, Tensor, TensorMap};
use crate::toy::{forward, Branch, Fp32Exec, ForwardOutput, Layer, LayerGraph, LinearExec, TrajectoryInput};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Rtn,
    Gptq,
}

impl FromStr for Solver {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rtn" => Ok(Solver::Rtn),
            "gptq" => Ok(Solver::Gptq),
            other => Err(QuantError::Config(format!("unknown solver {other:?}"))),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Rtn => "rtn",
            Solver::Gptq => "gptq",
        })
    }
}

/// How action-head activations get their scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActScaling {
    /// Per-token scales computed at run time.
    Dynamic,
    /// A calibrated per-channel table for every denoising step.
    PerStep,
    /// One calibrated per-channel table shared by all steps.
    SingleBucket,
}

impl FromStr for ActScaling {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dynamic" => Ok(ActScaling::Dynamic),
            "per-step" | "perstep" => Ok(ActScaling::PerStep),
            "single-bucket" | "bucket" => Ok(ActScaling::SingleBucket),
            other => Err(QuantError::Config(format!("unknown activation scaling {other:?}"))),
        }
    }
}

fn default_block() -> usize {
    64
}
fn default_percentile() -> f32 {
    DEFAULT_PERCENTILE
}
fn default_llm_solver() -> Solver {
    Solver::Gptq
}
fn default_dit_solver() -> Solver {
    Solver::Rtn
}
fn default_rotation() -> RotationKind {
    RotationKind::SvdHadamard
}
fn default_act_scaling() -> ActScaling {
    ActScaling::PerStep
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeOptions {
    #[serde(default)]
    pub bits: QuantConfig,
    #[serde(default = "default_rotation")]
    pub rotation: RotationKind,
    #[serde(default = "default_block")]
    pub block_size: usize,
    #[serde(default)]
    pub gptq: GptqConfig,
    #[serde(default = "default_llm_solver")]
    pub llm_solver: Solver,
    #[serde(default = "default_dit_solver")]
    pub dit_solver: Solver,
    #[serde(default = "default_act_scaling")]
    pub act_scaling: ActScaling,
    #[serde(default = "default_percentile")]
    pub percentile: f32,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl QuantizeOptions {
    pub fn solver_for(&self, branch: Branch) -> Solver {
        match branch {
            Branch::Llm => self.llm_solver,
            Branch::Dit => self.dit_solver,
        }
    }

    pub fn validate(&self) -> Result<()> {
        QuantConfig::new(self.bits.weight_bits, self.bits.act_bits)?;
        self.gptq.validate()?;
        if self.block_size == 0 {
            return Err(QuantError::Config("rotation block size must be positive".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(QuantError::Config(format!("percentile must be in (0, 100], got {}", self.percentile)));
        }
        Ok(())
    }
}

/// Every layer's unrotated input, pooled over tokens, steps and trajectories
/// (in trajectory order).
pub fn collect_layer_inputs(graph: &LayerGraph, inputs: &[TrajectoryInput]) -> Result<BTreeMap<String, Array2<f32>>> {
    let parts: Vec<Result<BTreeMap<String, Vec<Array2<f32>>>>> = inputs
        .par_iter()
        .map(|input| {
            let mut rows: BTreeMap<String, Vec<Array2<f32>>> = BTreeMap::new();
            let hook = |layer: &Layer, _step: Option<usize>, x: ArrayView2<f32>| {
                rows.entry(layer.id.clone()).or_default().push(x.to_owned());
            };
            forward(graph, input, &mut Fp32Exec::with_hook(hook))?;
            Ok(rows)
        })
        .collect();
    let mut rows: BTreeMap<String, Vec<Array2<f32>>> = BTreeMap::new();
    for part in parts {
        for (id, mut chunks) in part? {
            rows.entry(id).or_default().append(&mut chunks);
        }
    }
    Ok(rows
        .into_iter()
        .map(|(id, parts)| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            (id, concatenate(Axis(0), &views).expect("equal widths per layer"))
        })
        .collect())
}

/// Rotation plans for every layer of `graph`.
pub fn build_plans(graph: &LayerGraph, kind: RotationKind, block_size: usize) -> Result<BTreeMap<String, RotationPlan>> {
    graph
        .layers
        .iter()
        .map(|l| {
            let plan = match kind {
                RotationKind::Identity => RotationPlan::identity(l.c_in(), block_size),
                _ => RotationPlan::build(l.weight.view(), kind, block_size)?,
            };
            Ok((l.id.clone(), plan))
        })
        .collect()
}

/// A quantized model: per-layer integer weights plus the full-precision graph
/// for the non-linear parts.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub graph: LayerGraph,
    pub layers: BTreeMap<String, QuantizedLayer>,
    pub table: Option<ScaleTable>,
    pub options: QuantizeOptions,
}

/// Rotates, calibrates and quantizes every linear layer of `graph`.
pub fn quantize_model(graph: &LayerGraph, calib: &[TrajectoryInput], opts: &QuantizeOptions) -> Result<QuantizedModel> {
    opts.validate()?;
    let plans = build_plans(graph, opts.rotation, opts.block_size)?;
    let needs_hessian = graph.layers.iter().any(|l| opts.solver_for(l.branch) == Solver::Gptq);
    let inputs = if needs_hessian { collect_layer_inputs(graph, calib)? } else { BTreeMap::new() };

    let table = match opts.act_scaling {
        ActScaling::Dynamic => None,
        scaling => {
            let traces = capture_traces(graph, calib, &plans)?;
            let qm = opts.bits.act_q_max();
            Some(match scaling {
                ActScaling::PerStep => build_table(&traces, opts.percentile, qm)?,
                _ => single_bucket_table(&traces, opts.percentile, qm)?,
            })
        }
    };

    let mut layers = BTreeMap::new();
    for l in &graph.layers {
        let plan = plans[&l.id].clone();
        let rotated = plan.apply_to_weight(l.weight.view())?;
        let qm = opts.bits.weight_q_max();
        let (ints, scales) = match opts.solver_for(l.branch) {
            Solver::Rtn => rtn_quantize(rotated.view(), qm)?,
            Solver::Gptq => {
                let x = inputs
                    .get(&l.id)
                    .ok_or_else(|| QuantError::Missing(format!("calibration inputs for {}", l.id)))?;
                let mut acc = HessianAccumulator::new(l.c_in());
                acc.add(plan.apply_to_activation(x.view())?.view())?;
                gptq_quantize(rotated.view(), acc.hessian(), qm, &opts.gptq)?
            }
        };
        let act_mode = match (l.branch, &table) {
            (Branch::Dit, Some(_)) => ActivationScaleMode::TablePerStep,
            _ => ActivationScaleMode::DynamicPerToken,
        };
        layers.insert(
            l.id.clone(),
            QuantizedLayer::new(l.id.clone(), opts.bits, ints, scales, l.bias.clone(), plan, act_mode)?,
        );
    }
    Ok(QuantizedModel { graph: graph.clone(), layers, table, options: *opts })
}

/// Runs fake-quantized linears through the toy model's forward pass.
pub struct QuantExec<'a> {
    model: &'a QuantizedModel,
}

impl LinearExec for QuantExec<'_> {
    fn linear(&mut self, layer: &Layer, x: ArrayView2<f32>, step: Option<usize>) -> Result<Array2<f32>> {
        let q = self
            .model
            .layers
            .get(&layer.id)
            .ok_or_else(|| QuantError::Missing(format!("quantized layer {}", layer.id)))?;
        fake_quant_linear(x, q, step, self.model.table.as_ref())
    }
}

pub fn forward_fakequant(model: &QuantizedModel, input: &TrajectoryInput) -> Result<ForwardOutput> {
    forward(&model.graph, input, &mut QuantExec { model })
}

/// Byte accounting of a package against an FP16 copy of the same linears.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub packed_bytes: u64,
    pub scale_bytes: u64,
    pub rotation_bytes: u64,
    pub perm_bytes: u64,
    pub table_bytes: u64,
    pub bias_bytes: u64,
    pub total_bytes: u64,
    pub baseline_fp16_bytes: u64,
    pub savings: f64,
}

impl Accounting {
    fn finish(mut self, params: u64) -> Self {
        self.total_bytes = self.packed_bytes
            + self.scale_bytes
            + self.rotation_bytes
            + self.perm_bytes
            + self.table_bytes
            + self.bias_bytes;
        self.baseline_fp16_bytes = 2 * params;
        self.savings = if self.baseline_fp16_bytes == 0 {
            0.0
        } else {
            1.0 - self.total_bytes as f64 / self.baseline_fp16_bytes as f64
        };
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub c_in: usize,
    pub c_out: usize,
    pub solver: Solver,
    pub act_mode: ActivationScaleMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackageManifest {
    pub format_version: u32,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub rotation: RotationKind,
    pub block_size: usize,
    pub act_scaling: ActScaling,
    pub percentile: f32,
    pub layers: Vec<LayerEntry>,
    pub accounting: Accounting,
}

fn byte_len(t: &Tensor) -> u64 {
    match t.dtype() {
        DType::F32 => 4 * t.numel() as u64,
        DType::PackedI4 => t.numel().div_ceil(2) as u64,
        DType::U8 => t.numel() as u64,
    }
}

fn weight_tensor(layer: &QuantizedLayer) -> Result<Tensor> {
    let name = format!("w/{}", layer.name());
    let shape = vec![layer.c_in(), layer.c_out()];
    if layer.config().weight_bits <= 4 {
        let vals: Vec<i8> = layer.ints().iter().map(|&q| q as i8).collect();
        Tensor::packed_i4(name, shape, &vals)
    } else {
        Tensor::f32(name, shape, layer.ints().iter().map(|&q| q as f32).collect())
    }
}

/// Serializes a quantized model into package tensors plus its manifest.
pub fn assemble_package(model: &QuantizedModel) -> Result<(TensorMap, PackageManifest)> {
    let mut map = TensorMap::new();
    let mut acc = Accounting::default();
    let mut entries = Vec::new();
    let mut params = 0u64;
    for l in &model.graph.layers {
        let q = model
            .layers
            .get(&l.id)
            .ok_or_else(|| QuantError::Missing(format!("quantized layer {}", l.id)))?;
        params += l.params() as u64;
        let w = weight_tensor(q)?;
        acc.packed_bytes += byte_len(&w);
        insert_unique(&mut map, w)?;
        let s = Tensor::f32(format!("wscale/{}", l.id), vec![q.c_out()], q.weight_scales().to_vec())?;
        acc.scale_bytes += byte_len(&s);
        insert_unique(&mut map, s)?;
        if let Some(b) = q.bias() {
            let t = Tensor::f32(format!("bias/{}", l.id), vec![b.len()], b.to_vec())?;
            acc.bias_bytes += byte_len(&t);
            insert_unique(&mut map, t)?;
        }
        for t in q.rotation().to_tensors(&l.id)? {
            if t.name().ends_with("/perm") {
                acc.perm_bytes += byte_len(&t);
            } else {
                acc.rotation_bytes += byte_len(&t);
            }
            insert_unique(&mut map, t)?;
        }
        entries.push(LayerEntry {
            id: l.id.clone(),
            c_in: q.c_in(),
            c_out: q.c_out(),
            solver: model.options.solver_for(l.branch),
            act_mode: q.act_mode(),
        });
    }
    if let Some(table) = &model.table {
        for t in table.to_tensors()? {
            acc.table_bytes += byte_len(&t);
            insert_unique(&mut map, t)?;
        }
    }
    let opts = &model.options;
    let manifest = PackageManifest {
        format_version: FORMAT_VERSION,
        weight_bits: opts.bits.weight_bits,
        act_bits: opts.bits.act_bits,
        rotation: opts.rotation,
        block_size: opts.block_size,
        act_scaling: opts.act_scaling,
        percentile: opts.percentile,
        layers: entries,
        accounting: acc.finish(params),
    };
    insert_unique(&mut map, Tensor::bytes("manifest.json", serde_json::to_vec_pretty(&manifest)?)?)?;
    Ok((map, manifest))
}

pub fn read_manifest(map: &TensorMap) -> Result<PackageManifest> {
    let m: PackageManifest = serde_json::from_slice(get(map, "manifest.json")?.as_bytes()?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(QuantError::Format(format!("unsupported package version {}", m.format_version)));
    }
    Ok(m)
}

/// Rebuilds a quantized model from package tensors and its source graph.
pub fn load_package(map: &TensorMap, graph: &LayerGraph) -> Result<QuantizedModel> {
    let manifest = read_manifest(map)?;
    let bits = QuantConfig::new(manifest.weight_bits, manifest.act_bits)?;
    let mut layers = BTreeMap::new();
    for entry in &manifest.layers {
        let l = graph
            .layer(&entry.id)
            .ok_or_else(|| QuantError::Config(format!("package layer {} is not in the model", entry.id)))?;
        if (l.c_in(), l.c_out()) != (entry.c_in, entry.c_out) {
            return Err(QuantError::Shape(format!("package layer {} does not match the model shape", entry.id)));
        }
        let wt = get(map, &format!("w/{}", entry.id))?;
        if wt.shape() != [entry.c_in, entry.c_out] {
            return Err(QuantError::Shape(format!("w/{} has shape {:?}", entry.id, wt.shape())));
        }
        let ints: Vec<i32> = match wt.dtype() {
            DType::PackedI4 => wt.to_i4()?.into_iter().map(i32::from).collect(),
            DType::F32 => wt
                .as_f32()?
                .iter()
                .map(|&v| {
                    if v.fract() != 0.0 {
                        Err(QuantError::Corrupt(format!("w/{} holds a non-integer", entry.id)))
                    } else {
                        Ok(v as i32)
                    }
                })
                .collect::<Result<_>>()?,
            DType::U8 => return Err(QuantError::Format(format!("w/{} has byte dtype", entry.id))),
        };
        let ints = Array2::from_shape_vec((entry.c_in, entry.c_out), ints).expect("shape checked");
        let scales = get(map, &format!("wscale/{}", entry.id))?.as_f32()?.to_vec();
        let bias = match map.get(&format!("bias/{}", entry.id)) {
            Some(t) => Some(t.as_f32()?.to_vec()),
            None => None,
        };
        let plan = RotationPlan::from_tensors(map, &entry.id, manifest.rotation, manifest.block_size, entry.c_in)?;
        layers.insert(
            entry.id.clone(),
            QuantizedLayer::new(entry.id.clone(), bits, ints, scales, bias, plan, entry.act_mode)?,
        );
    }
    let table = ScaleTable::from_tensors(map)?;
    let routed = |branch: Branch| {
        manifest
            .layers
            .iter()
            .find(|e| graph.layer(&e.id).is_some_and(|l| l.branch == branch))
            .map(|e| e.solver)
    };
    let defaults = QuantizeOptions::default();
    let options = QuantizeOptions {
        llm_solver: routed(Branch::Llm).unwrap_or(defaults.llm_solver),
        dit_solver: routed(Branch::Dit).unwrap_or(defaults.dit_solver),
        bits,
        rotation: manifest.rotation,
        block_size: manifest.block_size,
        act_scaling: manifest.act_scaling,
        percentile: manifest.percentile,
        ..QuantizeOptions::default()
    };
    Ok(QuantizedModel {
        graph: graph.clone(),
        layers,
        table: if table.num_values() == 0 { None } else { Some(table) },
        options,
    })
}
