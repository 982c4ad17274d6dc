//! Synthetic two-branch network standing in for a vision-language-action policy.
//!
//! The LLM branch is a pre-norm transformer over prompt tokens; its final
//! hidden states condition a DiT-style action head that denoises an action
//! chunk over `T` Euler steps. Attention inputs in the action head pass
//! through an adaptive LayerNorm whose output is multiplied by a gain `g(t)`,
//! so their dynamic range drifts with the step by a known amount, while MLP
//! inputs pass through a plain LayerNorm and stay flat.

use std::fmt;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::tensor::{get, insert_unique, Tensor, TensorMap};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Llm,
    Dit,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Llm => "llm",
            Branch::Dit => "dit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [LayerKind::Q, LayerKind::K, LayerKind::V, LayerKind::O, LayerKind::Up, LayerKind::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Q => "q",
            LayerKind::K => "k",
            LayerKind::V => "v",
            LayerKind::O => "o",
            LayerKind::Up => "up",
            LayerKind::Down => "down",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormSource {
    AdaLN,
    PlainLN,
    None,
}

/// Multiplies selected input-channel rows of matching layers' weights.
///
/// `layer` is either a full id (`llm.q0`) or a branch-less selector (`q0`)
/// that matches the layer in both branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub layer: String,
    pub channels: Vec<usize>,
    pub multiplier: f32,
}

impl OutlierSpec {
    pub fn matches(&self, id: &str) -> bool {
        id == self.layer || id.split_once('.').map(|(_, rest)| rest == self.layer).unwrap_or(false)
    }
}

impl std::str::FromStr for OutlierSpec {
    type Err = QuantError;

    /// `layer:ch[,ch...]:multiplier`, e.g. `q0:3:50`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(QuantError::Config(format!("outlier {s:?} is not layer:channels:multiplier")));
        }
        let channels = parts[1]
            .split(',')
            .map(|c| c.trim().parse::<usize>().map_err(|e| QuantError::Config(format!("outlier channel {c:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let multiplier = parts[2].parse::<f32>().map_err(|e| QuantError::Config(format!("outlier multiplier: {e}")))?;
        Ok(Self { layer: parts[0].to_string(), channels, multiplier })
    }
}

/// Multiplies selected channels of every normalization gain on a branch,
/// producing persistent activation outliers at those channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationOutlierSpec {
    pub branch: Branch,
    #[serde(default)]
    pub site: NormSite,
    pub channels: Vec<usize>,
    pub multiplier: f32,
}

/// Which normalization layers of a block an activation outlier applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormSite {
    Attention,
    Mlp,
    #[default]
    Both,
}

impl NormSite {
    fn includes(self, other: NormSite) -> bool {
        self == NormSite::Both || self == other
    }
}

/// Linear AdaLN gain profile `g(t)` from `start` at `t = 0` to `end` at `t = T-1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub start: f32,
    pub end: f32,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self { start: 1.0, end: 0.8 }
    }
}

impl DriftSpec {
    pub fn none() -> Self {
        Self { start: 1.0, end: 1.0 }
    }

    pub fn gain(&self, t: usize, steps: usize) -> f32 {
        if steps <= 1 {
            return self.start;
        }
        self.start + (self.end - self.start) * t as f32 / (steps - 1) as f32
    }
}

fn default_seed() -> u64 {
    0
}
fn default_dim() -> usize {
    128
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_blocks() -> usize {
    3
}
fn default_tokens() -> usize {
    32
}
fn default_action_tokens() -> usize {
    16
}
fn default_steps() -> usize {
    8
}
fn default_trajectories() -> usize {
    10
}
fn default_embed_dim() -> usize {
    16
}
fn default_weight_row_spread() -> f32 {
    0.8
}
fn default_dit_residual_scale() -> f32 {
    0.03
}

/// Deterministic description of a toy model. Every field has a default, so
/// `{}` is a valid JSON config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Hidden width `d` of both branches.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_blocks")]
    pub llm_blocks: usize,
    #[serde(default = "default_blocks")]
    pub dit_blocks: usize,
    /// Prompt tokens per trajectory (LLM branch).
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    /// Action tokens per trajectory (DiT branch).
    #[serde(default = "default_action_tokens")]
    pub action_tokens: usize,
    /// Euler denoising steps `T`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_trajectories")]
    pub calib_trajectories: usize,
    #[serde(default = "default_trajectories")]
    pub eval_trajectories: usize,
    /// Width of the sinusoidal step embedding.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Log-normal spread of per-input-channel weight scales.
    #[serde(default = "default_weight_row_spread")]
    pub weight_row_spread: f32,
    /// Extra gain on the action head's output projections (`o`, `down`).
    #[serde(default = "default_dit_residual_scale")]
    pub dit_residual_scale: f32,
    #[serde(default = "default_outliers")]
    pub outliers: Vec<OutlierSpec>,
    #[serde(default = "default_activation_outliers")]
    pub activation_outliers: Vec<ActivationOutlierSpec>,
    #[serde(default)]
    pub drift: DriftSpec,
}

/// Weight-row outliers on the first attention and MLP projections of each branch.
pub fn default_outliers() -> Vec<OutlierSpec> {
    vec![
        OutlierSpec { layer: "q0".into(), channels: vec![3], multiplier: 50.0 },
        OutlierSpec { layer: "up1".into(), channels: vec![20], multiplier: 20.0 },
    ]
}

pub fn default_activation_outliers() -> Vec<ActivationOutlierSpec> {
    vec![
        ActivationOutlierSpec { branch: Branch::Llm, site: NormSite::Both, channels: vec![7, 45], multiplier: 20.0 },
        ActivationOutlierSpec { branch: Branch::Dit, site: NormSite::Attention, channels: vec![11, 70], multiplier: 12.0 },
    ]
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ToyModelSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(QuantError::Config(m));
        if self.dim < 2 || !self.dim.is_power_of_two() {
            return err(format!("dim must be a power of two >= 2, got {}", self.dim));
        }
        if self.mlp_ratio == 0 || self.tokens == 0 || self.action_tokens == 0 || self.steps == 0 {
            return err("mlp_ratio, tokens, action_tokens and steps must be positive".into());
        }
        if self.llm_blocks == 0 {
            return err("at least one LLM block is required".into());
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return err(format!("embed_dim must be a positive even number, got {}", self.embed_dim));
        }
        if !(self.weight_row_spread >= 0.0 && self.weight_row_spread.is_finite()) {
            return err(format!("weight_row_spread must be non-negative, got {}", self.weight_row_spread));
        }
        if !(self.dit_residual_scale >= 0.0 && self.dit_residual_scale.is_finite()) {
            return err(format!("dit_residual_scale must be non-negative, got {}", self.dit_residual_scale));
        }
        if !(self.drift.start > 0.0 && self.drift.end > 0.0) {
            return err("drift gains must be positive".into());
        }
        for o in &self.outliers {
            if !(o.multiplier > 0.0 && o.multiplier.is_finite()) {
                return err(format!("outlier multiplier for {} must be positive", o.layer));
            }
        }
        for o in &self.activation_outliers {
            if !(o.multiplier > 0.0 && o.multiplier.is_finite()) {
                return err("activation outlier multipliers must be positive".into());
            }
            if let Some(&c) = o.channels.iter().find(|&&c| c >= self.dim) {
                return err(format!("activation outlier channel {c} >= dim {}", self.dim));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub id: String,
    pub branch: Branch,
    pub kind: LayerKind,
    pub block: usize,
    pub norm_source: NormSource,
    /// `C_in × C_out`.
    pub weight: Array2<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Layer {
    pub fn c_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn c_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    pub shift: Vec<f32>,
}

/// Step-conditioned LayerNorm: `g(t)·(LN(x)·(gain + e(t)·A) + shift + e(t)·B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaNorm {
    pub base: Norm,
    pub scale_proj: Array2<f32>,
    pub shift_proj: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttnNorm {
    Plain(Norm),
    Ada(AdaNorm),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: AttnNorm,
    pub mlp_norm: Norm,
    /// Indices into `LayerGraph::layers` in `LayerKind::ALL` order.
    pub layers: [usize; 6],
}

/// Generated model: ordered linear layers plus the non-linear parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph {
    pub spec: ToyModelSpec,
    pub layers: Vec<Layer>,
    pub llm_blocks: Vec<BlockParams>,
    pub dit_blocks: Vec<BlockParams>,
}

/// One calibration/evaluation trajectory: prompt embeddings plus initial noise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryInput {
    pub prompt: Array2<f32>,
    pub noise: Array2<f32>,
}

#[derive(Clone, Debug)]
pub struct GeneratedModel {
    pub graph: LayerGraph,
    pub calibration: Vec<TrajectoryInput>,
    pub evaluation: Vec<TrajectoryInput>,
}

fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_WEIGHTS: u64 = 1;
const TAG_CALIB: u64 = 2;
const TAG_EVAL: u64 = 3;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn make_norm(rng: &mut ChaCha8Rng, dim: usize, branch: Branch, site: NormSite, spec: &ToyModelSpec) -> Norm {
    let mut gain: Vec<f32> = randn_vec(rng, dim, 0.1).into_iter().map(|v| 1.0 + v).collect();
    let shift = randn_vec(rng, dim, 0.1);
    for o in spec.activation_outliers.iter().filter(|o| o.branch == branch && o.site.includes(site)) {
        for &c in &o.channels {
            gain[c] *= o.multiplier;
        }
    }
    Norm { gain, shift }
}

fn make_layer(
    rng: &mut ChaCha8Rng,
    spec: &ToyModelSpec,
    branch: Branch,
    kind: LayerKind,
    block: usize,
) -> Result<Layer> {
    let d = spec.dim;
    let (c_in, c_out) = match kind {
        LayerKind::Up => (d, spec.mlp_dim()),
        LayerKind::Down => (spec.mlp_dim(), d),
        _ => (d, d),
    };
    let id = format!("{}.{}{}", branch.as_str(), kind.as_str(), block);
    let norm_source = match (branch, kind) {
        (Branch::Dit, LayerKind::Q | LayerKind::K | LayerKind::V) => NormSource::AdaLN,
        (_, LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::Up) => NormSource::PlainLN,
        _ => NormSource::None,
    };
    // The action head keeps its residual updates small so that the state fed
    // to the plain LayerNorm changes little over the denoising loop.
    let residual_scale = match (branch, kind) {
        (Branch::Llm, LayerKind::O | LayerKind::Down) => 0.5,
        (Branch::Dit, LayerKind::O | LayerKind::Down) => spec.dit_residual_scale,
        _ => 1.0,
    };
    let mut weight = randn(rng, c_in, c_out, residual_scale / (c_in as f32).sqrt());
    let spread = Normal::new(0.0f32, spec.weight_row_spread.max(1e-12)).expect("finite spread");
    // unit mean-square row scale: E[exp(2(σZ − σ²))] = 1
    let sigma2 = spec.weight_row_spread * spec.weight_row_spread;
    for mut row in weight.rows_mut() {
        let s = if spec.weight_row_spread > 0.0 { (spread.sample(rng) - sigma2).exp() } else { 1.0 };
        row.mapv_inplace(|v| v * s);
    }
    for o in spec.outliers.iter().filter(|o| o.matches(&id)) {
        for &c in &o.channels {
            if c >= c_in {
                return Err(QuantError::Config(format!("outlier channel {c} >= input width {c_in} of {id}")));
            }
            weight.row_mut(c).mapv_inplace(|v| v * o.multiplier);
        }
    }
    let bias = Some(randn_vec(rng, c_out, 0.02 * residual_scale));
    Ok(Layer { id, branch, kind, block, norm_source, weight, bias })
}

fn make_inputs(spec: &ToyModelSpec, tag: u64, count: usize) -> Vec<TrajectoryInput> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, tag, i as u64));
            TrajectoryInput {
                prompt: randn(&mut rng, spec.tokens, spec.dim, 1.0),
                noise: randn(&mut rng, spec.action_tokens, spec.dim, 1.0),
            }
        })
        .collect()
}

/// Generates the model and its disjoint calibration/evaluation input sets.
pub fn generate(spec: &ToyModelSpec) -> Result<GeneratedModel> {
    spec.validate()?;
    for o in &spec.outliers {
        let hits = (0..spec.llm_blocks)
            .map(|b| (Branch::Llm, b))
            .chain((0..spec.dit_blocks).map(|b| (Branch::Dit, b)))
            .flat_map(|(br, b)| LayerKind::ALL.iter().map(move |k| format!("{}.{}{}", br.as_str(), k.as_str(), b)))
            .any(|id| o.matches(&id));
        if !hits {
            return Err(QuantError::Config(format!("outlier selector {} matches no layer", o.layer)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, TAG_WEIGHTS, 0));
    let mut layers = Vec::new();
    let mut llm_blocks = Vec::new();
    let mut dit_blocks = Vec::new();
    for (branch, count) in [(Branch::Llm, spec.llm_blocks), (Branch::Dit, spec.dit_blocks)] {
        for b in 0..count {
            let attn_base = make_norm(&mut rng, spec.dim, branch, NormSite::Attention, spec);
            let attn_norm = match branch {
                Branch::Llm => AttnNorm::Plain(attn_base),
                Branch::Dit => AttnNorm::Ada(AdaNorm {
                    base: attn_base,
                    scale_proj: randn(&mut rng, spec.embed_dim, spec.dim, 0.005),
                    shift_proj: randn(&mut rng, spec.embed_dim, spec.dim, 0.005),
                }),
            };
            let mlp_norm = make_norm(&mut rng, spec.dim, branch, NormSite::Mlp, spec);
            let mut idx = [0usize; 6];
            for (slot, kind) in LayerKind::ALL.iter().enumerate() {
                idx[slot] = layers.len();
                layers.push(make_layer(&mut rng, spec, branch, *kind, b)?);
            }
            let params = BlockParams { attn_norm, mlp_norm, layers: idx };
            match branch {
                Branch::Llm => llm_blocks.push(params),
                Branch::Dit => dit_blocks.push(params),
            }
        }
    }
    Ok(GeneratedModel {
        graph: LayerGraph { spec: spec.clone(), layers, llm_blocks, dit_blocks },
        calibration: make_inputs(spec, TAG_CALIB, spec.calib_trajectories),
        evaluation: make_inputs(spec, TAG_EVAL, spec.eval_trajectories),
    })
}

impl LayerGraph {
    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn num_linear_params(&self) -> usize {
        self.layers.iter().map(Layer::params).sum()
    }

    /// Sets every parameter (weights, biases, norms) to zero.
    pub fn zeroed(&self) -> Self {
        let mut g = self.clone();
        let zero_norm = |n: &mut Norm| {
            n.gain.iter_mut().for_each(|v| *v = 0.0);
            n.shift.iter_mut().for_each(|v| *v = 0.0);
        };
        for l in &mut g.layers {
            l.weight.fill(0.0);
            if let Some(b) = &mut l.bias {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for b in g.llm_blocks.iter_mut().chain(g.dit_blocks.iter_mut()) {
            match &mut b.attn_norm {
                AttnNorm::Plain(n) => zero_norm(n),
                AttnNorm::Ada(a) => {
                    zero_norm(&mut a.base);
                    a.scale_proj.fill(0.0);
                    a.shift_proj.fill(0.0);
                }
            }
            zero_norm(&mut b.mlp_norm);
        }
        g
    }

    fn norm_prefix(branch: Branch, part: &str, block: usize) -> String {
        format!("norm/{}.{part}{block}", branch.as_str())
    }

    /// Container holding `spec.json`, `w/<layer>`, `bias/<layer>` and norm parameters.
    pub fn to_tensors(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        insert_unique(&mut map, Tensor::bytes("spec.json", serde_json::to_vec_pretty(&self.spec)?)?)?;
        for l in &self.layers {
            insert_unique(&mut map, Tensor::from_matrix(format!("w/{}", l.id), l.weight.view())?)?;
            if let Some(b) = &l.bias {
                insert_unique(&mut map, Tensor::f32(format!("bias/{}", l.id), vec![b.len()], b.clone())?)?;
            }
        }
        let d = self.spec.dim;
        for (branch, blocks) in [(Branch::Llm, &self.llm_blocks), (Branch::Dit, &self.dit_blocks)] {
            for (b, p) in blocks.iter().enumerate() {
                let attn = Self::norm_prefix(branch, "attn", b);
                let base = match &p.attn_norm {
                    AttnNorm::Plain(n) => n,
                    AttnNorm::Ada(a) => {
                        insert_unique(&mut map, Tensor::from_matrix(format!("{attn}/scale_proj"), a.scale_proj.view())?)?;
                        insert_unique(&mut map, Tensor::from_matrix(format!("{attn}/shift_proj"), a.shift_proj.view())?)?;
                        &a.base
                    }
                };
                insert_unique(&mut map, Tensor::f32(format!("{attn}/gain"), vec![d], base.gain.clone())?)?;
                insert_unique(&mut map, Tensor::f32(format!("{attn}/shift"), vec![d], base.shift.clone())?)?;
                let mlp = Self::norm_prefix(branch, "mlp", b);
                insert_unique(&mut map, Tensor::f32(format!("{mlp}/gain"), vec![d], p.mlp_norm.gain.clone())?)?;
                insert_unique(&mut map, Tensor::f32(format!("{mlp}/shift"), vec![d], p.mlp_norm.shift.clone())?)?;
            }
        }
        Ok(map)
    }

    /// Reads a model container; the structure comes from `spec.json`, every
    /// parameter from its tensor.
    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let spec: ToyModelSpec = serde_json::from_slice(get(map, "spec.json")?.as_bytes()?)?;
        let mut graph = generate(&ToyModelSpec { calib_trajectories: 0, eval_trajectories: 0, ..spec.clone() })?.graph;
        graph.spec = spec;
        let vec_of = |name: String, len: usize| -> Result<Vec<f32>> {
            let t = get(map, &name)?;
            let v = t.as_f32()?;
            if v.len() != len {
                return Err(QuantError::Shape(format!("{name} has {} entries, expected {len}", v.len())));
            }
            Ok(v.to_vec())
        };
        let mat_of = |name: String, dim: (usize, usize)| -> Result<Array2<f32>> {
            let m = get(map, &name)?.to_matrix()?;
            if m.dim() != dim {
                return Err(QuantError::Shape(format!("{name} has shape {:?}, expected {dim:?}", m.dim())));
            }
            Ok(m)
        };
        for l in &mut graph.layers {
            l.weight = mat_of(format!("w/{}", l.id), l.weight.dim())?;
            l.bias = match map.get(&format!("bias/{}", l.id)) {
                Some(_) => Some(vec_of(format!("bias/{}", l.id), l.c_out())?),
                None => None,
            };
        }
        let d = graph.spec.dim;
        let e = graph.spec.embed_dim;
        for (branch, blocks) in [(Branch::Llm, &mut graph.llm_blocks), (Branch::Dit, &mut graph.dit_blocks)] {
            for (b, p) in blocks.iter_mut().enumerate() {
                let attn = Self::norm_prefix(branch, "attn", b);
                let base = match &mut p.attn_norm {
                    AttnNorm::Plain(n) => n,
                    AttnNorm::Ada(a) => {
                        a.scale_proj = mat_of(format!("{attn}/scale_proj"), (e, d))?;
                        a.shift_proj = mat_of(format!("{attn}/shift_proj"), (e, d))?;
                        &mut a.base
                    }
                };
                base.gain = vec_of(format!("{attn}/gain"), d)?;
                base.shift = vec_of(format!("{attn}/shift"), d)?;
                let mlp = Self::norm_prefix(branch, "mlp", b);
                p.mlp_norm.gain = vec_of(format!("{mlp}/gain"), d)?;
                p.mlp_norm.shift = vec_of(format!("{mlp}/shift"), d)?;
            }
        }
        Ok(graph)
    }
}

/// Regenerates the input sets described by a spec without building weights.
pub fn inputs_for(spec: &ToyModelSpec) -> (Vec<TrajectoryInput>, Vec<TrajectoryInput>) {
    (make_inputs(spec, TAG_CALIB, spec.calib_trajectories), make_inputs(spec, TAG_EVAL, spec.eval_trajectories))
}

/// Executes the linear layers of a forward pass.
pub trait LinearExec {
    /// `step` is `Some(t)` inside the denoising loop and `None` on the LLM branch.
    fn linear(&mut self, layer: &Layer, x: ArrayView2<f32>, step: Option<usize>) -> Result<Array2<f32>>;
}

pub fn dense_linear(layer: &Layer, x: ArrayView2<f32>) -> Array2<f32> {
    let mut y = x.dot(&layer.weight);
    if let Some(b) = &layer.bias {
        y += &ArrayView2::from_shape((1, b.len()), b).expect("bias row");
    }
    y
}

/// Full-precision execution with an optional hook seeing every layer input.
pub struct Fp32Exec<F = fn(&Layer, Option<usize>, ArrayView2<f32>)>
where
    F: FnMut(&Layer, Option<usize>, ArrayView2<f32>),
{
    hook: Option<F>,
}

impl Fp32Exec {
    pub fn new() -> Self {
        Self { hook: None }
    }
}

impl Default for Fp32Exec {
    fn default() -> Self {
        Self::new()
    }
}

impl<F> Fp32Exec<F>
where
    F: FnMut(&Layer, Option<usize>, ArrayView2<f32>),
{
    pub fn with_hook(hook: F) -> Self {
        Self { hook: Some(hook) }
    }
}

impl<F> LinearExec for Fp32Exec<F>
where
    F: FnMut(&Layer, Option<usize>, ArrayView2<f32>),
{
    fn linear(&mut self, layer: &Layer, x: ArrayView2<f32>, step: Option<usize>) -> Result<Array2<f32>> {
        if let Some(h) = &mut self.hook {
            h(layer, step, x);
        }
        Ok(dense_linear(layer, x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Final LLM hidden states (`tokens × d`).
    pub cond: Array2<f32>,
    /// Denoised action chunk (`action_tokens × d`).
    pub action: Array2<f32>,
}

fn layer_norm(x: ArrayView2<f32>) -> Array2<f32> {
    let d = x.ncols() as f32;
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn apply_norm(x: ArrayView2<f32>, n: &Norm) -> Array2<f32> {
    let mut y = layer_norm(x);
    for mut row in y.rows_mut() {
        for ((v, &g), &b) in row.iter_mut().zip(&n.gain).zip(&n.shift) {
            *v = *v * g + b;
        }
    }
    y
}

/// Sinusoidal embedding of a denoising step.
pub fn step_embedding(t: usize, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    Array1::from_shape_fn(dim, |i| {
        let k = i % half;
        let freq = (-(k as f32) * (10_000f32).ln() / half as f32).exp();
        let arg = t as f32 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

fn apply_ada_norm(x: ArrayView2<f32>, a: &AdaNorm, t: usize, gain: f32, embed_dim: usize) -> Array2<f32> {
    let e = step_embedding(t, embed_dim);
    let scale = e.dot(&a.scale_proj);
    let shift = e.dot(&a.shift_proj);
    let mut y = layer_norm(x);
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = gain * (*v * (a.base.gain[j] + scale[j]) + a.base.shift[j] + shift[j]);
        }
    }
    y
}

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Single-head scaled dot-product attention without masking.
fn attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    for mut row in scores.rows_mut() {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|s| (s - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|s| s / sum);
    }
    scores.dot(v)
}

fn checked(layer: &Layer, y: Array2<f32>) -> Result<Array2<f32>> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::Numeric(format!("non-finite output at layer {}", layer.id)));
    }
    Ok(y)
}

fn run<E: LinearExec>(
    graph: &LayerGraph,
    exec: &mut E,
    idx: usize,
    x: ArrayView2<f32>,
    step: Option<usize>,
) -> Result<Array2<f32>> {
    let layer = &graph.layers[idx];
    let y = exec.linear(layer, x, step)?;
    if y.dim() != (x.nrows(), layer.c_out()) {
        return Err(QuantError::Shape(format!("layer {} produced {:?}", layer.id, y.dim())));
    }
    checked(layer, y)
}

fn mlp<E: LinearExec>(
    graph: &LayerGraph,
    exec: &mut E,
    p: &BlockParams,
    h: ArrayView2<f32>,
    step: Option<usize>,
) -> Result<Array2<f32>> {
    let up = run(graph, exec, p.layers[4], h, step)?.mapv(gelu);
    run(graph, exec, p.layers[5], up.view(), step)
}

fn llm_forward<E: LinearExec>(graph: &LayerGraph, exec: &mut E, prompt: ArrayView2<f32>) -> Result<Array2<f32>> {
    let mut x = prompt.to_owned();
    for p in &graph.llm_blocks {
        let n = match &p.attn_norm {
            AttnNorm::Plain(n) => n,
            AttnNorm::Ada(_) => return Err(QuantError::Config("LLM blocks use plain LayerNorm".into())),
        };
        let h = apply_norm(x.view(), n);
        let q = run(graph, exec, p.layers[0], h.view(), None)?;
        let k = run(graph, exec, p.layers[1], h.view(), None)?;
        let v = run(graph, exec, p.layers[2], h.view(), None)?;
        let att = attention(&q, &k, &v);
        x += &run(graph, exec, p.layers[3], att.view(), None)?;
        let h2 = apply_norm(x.view(), &p.mlp_norm);
        x += &mlp(graph, exec, p, h2.view(), None)?;
    }
    Ok(layer_norm(x.view()))
}

fn dit_velocity<E: LinearExec>(
    graph: &LayerGraph,
    exec: &mut E,
    x: ArrayView2<f32>,
    cond: ArrayView2<f32>,
    t: usize,
) -> Result<Array2<f32>> {
    let spec = &graph.spec;
    let gain = spec.drift.gain(t, spec.steps);
    let n_act = x.nrows();
    let mut z = x.to_owned();
    for p in &graph.dit_blocks {
        let a = match &p.attn_norm {
            AttnNorm::Ada(a) => a,
            AttnNorm::Plain(_) => return Err(QuantError::Config("DiT blocks use adaptive LayerNorm".into())),
        };
        let seq = concatenate(Axis(0), &[z.view(), cond.view()]).expect("equal widths");
        let h = apply_ada_norm(seq.view(), a, t, gain, spec.embed_dim);
        let q = run(graph, exec, p.layers[0], h.view(), Some(t))?;
        let k = run(graph, exec, p.layers[1], h.view(), Some(t))?;
        let v = run(graph, exec, p.layers[2], h.view(), Some(t))?;
        let att = attention(&q, &k, &v);
        z += &run(graph, exec, p.layers[3], att.slice(s![..n_act, ..]), Some(t))?;
        let h2 = apply_norm(z.view(), &p.mlp_norm);
        z += &mlp(graph, exec, p, h2.view(), Some(t))?;
    }
    Ok(z - &x)
}

/// Runs both branches: LLM once, then `steps` Euler updates `x ← x + f(x, t, cond)/T`.
pub fn forward<E: LinearExec>(graph: &LayerGraph, input: &TrajectoryInput, exec: &mut E) -> Result<ForwardOutput> {
    let spec = &graph.spec;
    if input.prompt.ncols() != spec.dim || input.noise.ncols() != spec.dim {
        return Err(QuantError::Shape(format!(
            "inputs have widths {}/{}, model dim is {}",
            input.prompt.ncols(),
            input.noise.ncols(),
            spec.dim
        )));
    }
    let cond = llm_forward(graph, exec, input.prompt.view())?;
    let mut x = input.noise.clone();
    let dt = 1.0 / spec.steps as f32;
    for t in 0..spec.steps {
        let f = dit_velocity(graph, exec, x.view(), cond.view(), t)?;
        x.scaled_add(dt, &f);
    }
    Ok(ForwardOutput { cond, action: x })
}

pub fn forward_fp32(graph: &LayerGraph, input: &TrajectoryInput) -> Result<ForwardOutput> {
    forward(graph, input, &mut Fp32Exec::new())
}

impl fmt::Display for ToyModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "toy(seed={}, d={}, llm={}, dit={}, T={})",
            self.seed, self.dim, self.llm_blocks, self.dit_blocks, self.steps
        )
    }
}
