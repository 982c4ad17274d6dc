//! Activation trace capture and per-step activation scale tables.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::rotation::RotationPlan;
use crate::tensor::{insert_unique, Tensor, TensorMap};
use crate::toy::{forward, Branch, Fp32Exec, Layer, LayerGraph, TrajectoryInput};

pub const DEFAULT_PERCENTILE: f32 = 99.9;

/// Percentile of `|samples|` with linear interpolation at `(p/100)·(n-1)`.
pub fn robust_peak(samples: &[f32], percentile: f32) -> Result<f32> {
    if samples.is_empty() {
        return Err(QuantError::Config("robust_peak needs at least one sample".into()));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(QuantError::Config(format!("percentile must be in (0, 100], got {percentile}")));
    }
    let mut mags: Vec<f32> = samples.iter().map(|v| v.abs()).collect();
    if mags.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::Numeric("non-finite sample in robust_peak".into()));
    }
    mags.sort_by(f32::total_cmp);
    let pos = (percentile as f64 / 100.0) * (mags.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(mags.len() - 1);
    let frac = (pos - lo as f64) as f32;
    Ok(mags[lo] + frac * (mags[hi] - mags[lo]))
}

/// Per-channel robust peaks of a `tokens × channels` trace.
pub fn channel_peaks(trace: ArrayView2<f32>, percentile: f32) -> Result<Vec<f32>> {
    trace
        .columns()
        .into_iter()
        .map(|c| robust_peak(&c.to_vec(), percentile))
        .collect()
}

fn peak_to_scale(peak: f32, q_max: i32) -> f32 {
    if peak > 0.0 {
        peak / q_max as f32
    } else {
        1.0 / q_max as f32
    }
}

/// Post-rotation activations per `(layer, step)`, pooled over tokens and trajectories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceBuffer {
    traces: BTreeMap<String, BTreeMap<usize, Array2<f32>>>,
}

impl TraceBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends rows to the trace of `(layer, step)`.
    pub fn push(&mut self, layer: &str, step: usize, rows: ArrayView2<f32>) -> Result<()> {
        let steps = self.traces.entry(layer.to_string()).or_default();
        match steps.get_mut(&step) {
            Some(existing) => {
                if existing.ncols() != rows.ncols() {
                    return Err(QuantError::Shape(format!(
                        "trace {layer}/step{step} has {} channels, got {}",
                        existing.ncols(),
                        rows.ncols()
                    )));
                }
                *existing = concatenate(Axis(0), &[existing.view(), rows.view()]).expect("widths checked");
            }
            None => {
                steps.insert(step, rows.to_owned());
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.traces.keys().map(String::as_str)
    }

    pub fn steps(&self, layer: &str) -> Vec<usize> {
        self.traces.get(layer).map(|s| s.keys().copied().collect()).unwrap_or_default()
    }

    pub fn get(&self, layer: &str, step: usize) -> Result<&Array2<f32>> {
        self.traces
            .get(layer)
            .and_then(|s| s.get(&step))
            .ok_or_else(|| QuantError::Missing(format!("trace {layer}/step{step}")))
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Appends every trace of `other` after the rows already held.
    pub fn merge(&mut self, other: TraceBuffer) -> Result<()> {
        for (layer, steps) in other.traces {
            for (t, m) in steps {
                self.push(&layer, t, m.view())?;
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for (layer, steps) in &self.traces {
            for (t, m) in steps {
                insert_unique(&mut map, Tensor::from_matrix(format!("trace/{layer}/step{t}"), m.view())?)?;
            }
        }
        Ok(map)
    }

    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let mut buf = Self::new();
        for (name, t) in map {
            let Some(rest) = name.strip_prefix("trace/") else { continue };
            let (layer, step) = rest
                .rsplit_once("/step")
                .ok_or_else(|| QuantError::Format(format!("bad trace name {name}")))?;
            let step: usize = step.parse().map_err(|_| QuantError::Format(format!("bad trace step in {name}")))?;
            buf.push(layer, step, t.to_matrix()?.view())?;
        }
        Ok(buf)
    }
}

/// Runs the full-precision model over `inputs` and records, for every
/// action-head layer, its input after that layer's rotation.
///
/// Trajectories run in parallel; their buffers are merged in input order so
/// the result does not depend on scheduling. Layers without a plan are
/// recorded unrotated.
pub fn capture_traces(
    graph: &LayerGraph,
    inputs: &[TrajectoryInput],
    plans: &BTreeMap<String, RotationPlan>,
) -> Result<TraceBuffer> {
    let parts: Vec<Result<TraceBuffer>> = inputs
        .par_iter()
        .map(|input| {
            let mut local = TraceBuffer::new();
            let mut failure: Option<QuantError> = None;
            let hook = |layer: &Layer, step: Option<usize>, x: ArrayView2<f32>| {
                let (Branch::Dit, Some(t)) = (layer.branch, step) else { return };
                if failure.is_some() {
                    return;
                }
                let res = match plans.get(&layer.id) {
                    Some(plan) => plan.apply_to_activation(x).and_then(|xr| local.push(&layer.id, t, xr.view())),
                    None => local.push(&layer.id, t, x),
                };
                if let Err(e) = res {
                    failure = Some(e);
                }
            };
            forward(graph, input, &mut Fp32Exec::with_hook(hook))?;
            match failure {
                Some(e) => Err(e),
                None => Ok(local),
            }
        })
        .collect();
    let mut buf = TraceBuffer::new();
    for part in parts {
        buf.merge(part?)?;
    }
    Ok(buf)
}

/// Activation step sizes `Δ[layer][step][channel]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleTable {
    entries: BTreeMap<String, BTreeMap<usize, Vec<f32>>>,
}

impl ScaleTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: &str, step: usize, scales: Vec<f32>) -> Result<()> {
        if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(QuantError::Numeric(format!("scale {bad} for {layer}/step{step} is not positive")));
        }
        self.entries.entry(layer.to_string()).or_default().insert(step, scales);
        Ok(())
    }

    pub fn scales(&self, layer: &str, step: usize) -> Result<&[f32]> {
        self.entries
            .get(layer)
            .and_then(|s| s.get(&step))
            .map(Vec::as_slice)
            .ok_or_else(|| QuantError::Missing(format!("activation scales for {layer} at step {step}")))
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn steps(&self, layer: &str) -> Vec<usize> {
        self.entries.get(layer).map(|s| s.keys().copied().collect()).unwrap_or_default()
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.entries.contains_key(layer)
    }

    /// Number of stored scale values.
    pub fn num_values(&self) -> usize {
        self.entries.values().flat_map(|s| s.values()).map(Vec::len).sum()
    }

    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for (layer, steps) in &self.entries {
            for (t, s) in steps {
                out.push(Tensor::f32(format!("actscale/{layer}/step{t}"), vec![s.len()], s.clone())?);
            }
        }
        Ok(out)
    }

    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let mut table = Self::new();
        for (name, t) in map {
            let Some(rest) = name.strip_prefix("actscale/") else { continue };
            let (layer, step) = rest
                .rsplit_once("/step")
                .ok_or_else(|| QuantError::Format(format!("bad scale name {name}")))?;
            let step: usize = step.parse().map_err(|_| QuantError::Format(format!("bad scale step in {name}")))?;
            table.insert(layer, step, t.as_f32()?.to_vec())?;
        }
        Ok(table)
    }
}

/// Per-step, per-channel table: `Δ = robust_peak / q_max`.
pub fn build_table(traces: &TraceBuffer, percentile: f32, q_max: i32) -> Result<ScaleTable> {
    let mut table = ScaleTable::new();
    for layer in traces.layers() {
        for t in traces.steps(layer) {
            let peaks = channel_peaks(traces.get(layer, t)?.view(), percentile)?;
            table.insert(layer, t, peaks.into_iter().map(|p| peak_to_scale(p, q_max)).collect())?;
        }
    }
    Ok(table)
}

/// One scale per channel shared by every step: the mean over steps of the
/// per-step robust peaks.
pub fn single_bucket_table(traces: &TraceBuffer, percentile: f32, q_max: i32) -> Result<ScaleTable> {
    let mut table = ScaleTable::new();
    for layer in traces.layers() {
        let steps = traces.steps(layer);
        let mut mean: Vec<f32> = Vec::new();
        for &t in &steps {
            let peaks = channel_peaks(traces.get(layer, t)?.view(), percentile)?;
            if mean.is_empty() {
                mean = vec![0.0; peaks.len()];
            }
            if peaks.len() != mean.len() {
                return Err(QuantError::Shape(format!("trace widths differ across steps for {layer}")));
            }
            for (m, p) in mean.iter_mut().zip(peaks) {
                *m += p / steps.len() as f32;
            }
        }
        let scales: Vec<f32> = mean.into_iter().map(|p| peak_to_scale(p, q_max)).collect();
        for &t in &steps {
            table.insert(layer, t, scales.clone())?;
        }
    }
    Ok(table)
}
