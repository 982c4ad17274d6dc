//! Unified pipeline configuration: JSON file values, overridden by flags.

use std::path::Path;

use anyhow::Context;
use qvla_core::calibration::DEFAULT_PERCENTILE;
use qvla_core::gptq::GptqConfig;
use qvla_core::package::{ActScaling, QuantizeOptions, Solver};
use qvla_core::quant::QuantConfig;
use qvla_core::rotation::RotationKind;
use qvla_core::toy::{OutlierSpec, ToyModelSpec};
use qvla_core::QuantError;
use serde::{Deserialize, Serialize};

/// Every field is optional; unset fields fall back to the defaults below.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub llm_blocks: Option<usize>,
    pub dit_blocks: Option<usize>,
    pub tokens: Option<usize>,
    pub action_tokens: Option<usize>,
    pub steps: Option<usize>,
    pub trajectories: Option<usize>,
    pub outliers: Option<Vec<OutlierSpec>>,
    pub bits: Option<u32>,
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub rotation: Option<RotationKind>,
    pub block_size: Option<usize>,
    /// Solver for both branches unless a branch-specific one is set.
    pub solver: Option<Solver>,
    pub solver_llm: Option<Solver>,
    pub solver_dit: Option<Solver>,
    pub gptq_block: Option<usize>,
    pub damp: Option<f64>,
    pub percentile: Option<f32>,
    pub act_scaling: Option<ActScaling>,
    pub compare: Option<Vec<RotationKind>>,
    pub layers: Option<Vec<String>>,
}

pub const DEFAULT_BLOCK: usize = 64;
pub const DEFAULT_STEPS: usize = 8;
pub const DEFAULT_TRAJECTORIES: usize = 10;

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| QuantError::Config(format!("config {}: {e}", path.display())))
            .map_err(anyhow::Error::from)
    }

    /// Fields set in `over` win.
    pub fn overlay(self, over: PipelineConfig) -> PipelineConfig {
        macro_rules! pick {
            ($($f:ident),*) => { PipelineConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            seed, dim, llm_blocks, dit_blocks, tokens, action_tokens, steps, trajectories, outliers, bits,
            weight_bits, act_bits, rotation, block_size, solver, solver_llm, solver_dit, gptq_block, damp, percentile,
            act_scaling, compare, layers
        )
    }

    pub fn toy_spec(&self) -> ToyModelSpec {
        let base = ToyModelSpec::default();
        let n = self.trajectories.unwrap_or(DEFAULT_TRAJECTORIES);
        let dim = self.dim.unwrap_or(base.dim);
        let blocks = self.llm_blocks.unwrap_or(base.llm_blocks).max(self.dit_blocks.unwrap_or(base.dit_blocks));
        // default activation outlier channels that do not fit a narrower model are dropped
        let activation_outliers = base
            .activation_outliers
            .iter()
            .cloned()
            .map(|mut o| {
                o.channels.retain(|&c| c < dim);
                o
            })
            .filter(|o| !o.channels.is_empty())
            .collect();
        ToyModelSpec {
            seed: self.seed.unwrap_or(base.seed),
            dim,
            activation_outliers,
            llm_blocks: self.llm_blocks.unwrap_or(base.llm_blocks),
            dit_blocks: self.dit_blocks.unwrap_or(base.dit_blocks),
            tokens: self.tokens.unwrap_or(base.tokens),
            action_tokens: self.action_tokens.unwrap_or(base.action_tokens),
            steps: self.steps.unwrap_or(DEFAULT_STEPS),
            calib_trajectories: n,
            eval_trajectories: n,
            outliers: self.outliers.clone().unwrap_or_else(|| default_outliers_for(&base.outliers, dim, blocks)),
            ..base
        }
    }

    pub fn quant_config(&self) -> Result<QuantConfig, QuantError> {
        let bits = self.bits.unwrap_or(4);
        QuantConfig::new(self.weight_bits.unwrap_or(bits), self.act_bits.unwrap_or(bits))
    }

    pub fn quantize_options(&self) -> Result<QuantizeOptions, QuantError> {
        let opts = QuantizeOptions {
            bits: self.quant_config()?,
            rotation: self.rotation.unwrap_or(RotationKind::SvdHadamard),
            block_size: self.block_size.unwrap_or(DEFAULT_BLOCK),
            gptq: GptqConfig {
                block_size: self.gptq_block.unwrap_or(GptqConfig::default().block_size),
                damp: self.damp.unwrap_or(GptqConfig::default().damp),
            },
            llm_solver: self.solver_llm.or(self.solver).unwrap_or(Solver::Gptq),
            dit_solver: self.solver_dit.or(self.solver).unwrap_or(Solver::Rtn),
            act_scaling: self.act_scaling.unwrap_or(ActScaling::PerStep),
            percentile: self.percentile.unwrap_or(DEFAULT_PERCENTILE),
        };
        opts.validate()?;
        Ok(opts)
    }

    pub fn compare_kinds(&self) -> Vec<RotationKind> {
        self.compare
            .clone()
            .unwrap_or_else(|| vec![RotationKind::Identity, RotationKind::Svd, RotationKind::SvdHadamard])
    }
}

/// Default weight outliers restricted to blocks and channels the model has.
fn default_outliers_for(defaults: &[OutlierSpec], dim: usize, blocks: usize) -> Vec<OutlierSpec> {
    defaults
        .iter()
        .cloned()
        .filter(|o| {
            let digits = o.layer.trim_start_matches(|c: char| !c.is_ascii_digit());
            digits.parse::<usize>().is_ok_and(|b| b < blocks)
        })
        .map(|mut o| {
            o.channels.retain(|&c| c < dim);
            o
        })
        .filter(|o| !o.channels.is_empty())
        .collect()
}

/// Rejects rotation block sizes that do not tile every layer width.
pub fn check_block_size(kind: RotationKind, block: usize, widths: &[usize]) -> Result<(), QuantError> {
    if kind == RotationKind::Identity {
        return Ok(());
    }
    if block == 0 {
        return Err(QuantError::Config("block size must be positive".into()));
    }
    if matches!(kind, RotationKind::Hadamard | RotationKind::SvdHadamard) && !block.is_power_of_two() {
        return Err(QuantError::Config(format!("block size {block} must be a power of two for {kind}")));
    }
    if let Some(w) = widths.iter().find(|&&w| w % block != 0) {
        return Err(QuantError::Config(format!("block size {block} does not divide layer width {w}")));
    }
    Ok(())
}
