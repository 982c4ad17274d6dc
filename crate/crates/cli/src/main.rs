//! `qvla`: generate a toy policy, calibrate, quantize and evaluate it.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! runtime and numeric failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qvla_core::package::{ActScaling, Solver};
use qvla_core::rotation::RotationKind;
use qvla_core::toy::OutlierSpec;
use qvla_core::QuantError;

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "qvla", version, about = "Rotation-based W4A4 quantization of a toy VLA policy")]
struct Cli {
    /// JSON file with pipeline settings; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy model container.
    GenToy(GenToyArgs),
    /// Capture calibration traces and build activation scale tables.
    Calibrate(CalibrateArgs),
    /// Rotate, calibrate and quantize a model into a package.
    Quantize(QuantizeArgs),
    /// Compute diagnostics and write a JSON report.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    llm_blocks: Option<usize>,
    #[arg(long)]
    dit_blocks: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    action_tokens: Option<usize>,
    /// Euler steps `T`.
    #[arg(long)]
    steps: Option<usize>,
    /// Trajectories in each of the calibration and evaluation sets.
    #[arg(long)]
    trajectories: Option<usize>,
    /// `layer:channels:multiplier`, e.g. `q0:3:50`; repeatable. Replaces the default outliers.
    #[arg(long = "outlier")]
    outliers: Vec<OutlierSpec>,
}

#[derive(Args, Debug, Default)]
struct QuantArgs {
    /// Weight and activation bit width.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    weight_bits: Option<u32>,
    #[arg(long)]
    act_bits: Option<u32>,
    /// identity (none), permute, svd, hadamard or svd-hadamard.
    #[arg(long)]
    rotation: Option<RotationKind>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    percentile: Option<f32>,
}

#[derive(Args, Debug)]
struct GenToyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    /// Override the number of denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Scale table as JSON `{layer: {step: [scales]}}`.
    #[arg(long)]
    table_json: Option<PathBuf>,
    /// Scale table as a container of `actscale/<layer>/step<t>` tensors.
    #[arg(long)]
    table_out: Option<PathBuf>,
    /// Raw traces as a container of `trace/<layer>/step<t>` tensors.
    #[arg(long)]
    traces_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    /// Solver for both branches; `--solver-llm`/`--solver-dit` take precedence.
    #[arg(long)]
    solver: Option<Solver>,
    #[arg(long)]
    solver_llm: Option<Solver>,
    #[arg(long)]
    solver_dit: Option<Solver>,
    #[arg(long)]
    gptq_block: Option<usize>,
    #[arg(long = "gptq-damp")]
    damp: Option<f64>,
    /// per-step, single-bucket or dynamic.
    #[arg(long)]
    act_scaling: Option<ActScaling>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Quantized package; without it the model is compared with itself.
    #[arg(long)]
    package: Option<PathBuf>,
    /// Comma-separated rotation kinds for the per-layer comparison.
    #[arg(long, value_delimiter = ',')]
    compare: Vec<RotationKind>,
    /// Comma-separated layer ids; defaults to five sampled layers per branch.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of the per-layer error table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn non_empty<T>(v: Vec<T>) -> Option<Vec<T>> {
    if v.is_empty() {
        None
    } else {
        Some(v)
    }
}

impl ModelArgs {
    fn to_config(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            dim: self.dim,
            llm_blocks: self.llm_blocks,
            dit_blocks: self.dit_blocks,
            tokens: self.tokens,
            action_tokens: self.action_tokens,
            steps: self.steps,
            trajectories: self.trajectories,
            outliers: non_empty(self.outliers.clone()),
            ..Default::default()
        }
    }
}

impl QuantArgs {
    fn to_config(&self) -> PipelineConfig {
        PipelineConfig {
            bits: self.bits,
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            rotation: self.rotation,
            block_size: self.block_size,
            percentile: self.percentile,
            ..Default::default()
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|c| c.downcast_ref::<QuantError>().is_some_and(QuantError::is_config));
    if usage {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("QVLA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| QuantError::Config(format!("QVLA_THREADS must be a positive integer, got {v:?}")))?;
        qvla_core::init_thread_pool(n)?;
    }
    let file = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenToy(a) => commands::gen_toy(&file.overlay(a.model.to_config()), &a.out),
        Command::Calibrate(a) => {
            let cfg = file.overlay(PipelineConfig { steps: a.steps, ..a.quant.to_config() });
            commands::calibrate(
                &cfg,
                &a.model,
                a.table_json.as_deref(),
                a.table_out.as_deref(),
                a.traces_out.as_deref(),
            )
        }
        Command::Quantize(a) => {
            let cfg = file.overlay(PipelineConfig {
                solver: a.solver,
                solver_llm: a.solver_llm,
                solver_dit: a.solver_dit,
                gptq_block: a.gptq_block,
                damp: a.damp,
                act_scaling: a.act_scaling,
                ..a.quant.to_config()
            });
            commands::quantize(&cfg, &a.model, &a.out)
        }
        Command::Eval(a) => {
            let cfg = file.overlay(PipelineConfig {
                compare: non_empty(a.compare),
                layers: non_empty(a.layers),
                block_size: a.block_size,
                ..Default::default()
            });
            commands::eval(&cfg, &a.model, a.package.as_deref(), &a.out, a.csv.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
