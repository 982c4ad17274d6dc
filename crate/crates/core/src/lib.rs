//! Rotation-based post-training quantization for a two-branch action policy.
//!
//! Weights are rotated per input block (`W' = R̂ᵀPᵀW`, activations `X·P·R̂`),
//! quantized to symmetric integers, and activations in the action head are
//! quantized with per-denoising-step scales.

pub mod analyzer;
pub mod calibration;
pub mod error;
pub mod gptq;
pub mod linalg;
pub mod package;
pub mod quant;
pub mod rotation;
pub mod tensor;
pub mod toy;

pub use error::{QuantError, Result};

/// Caps the global worker pool; call once before any parallel work.
pub fn init_thread_pool(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| QuantError::Config(format!("thread pool: {e}")))
}
