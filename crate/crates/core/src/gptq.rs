//! Second-order weight rounding with error feedback through the inverse Hessian.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::linalg::{cholesky_upper, spd_inverse};
use crate::quant::{quantize_value, weight_scales_per_channel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptqConfig {
    /// Input rows processed per lazy-update block.
    pub block_size: usize,
    /// Diagonal damping as a fraction of the mean Hessian diagonal.
    pub damp: f64,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self { block_size: 128, damp: 0.01 }
    }
}

impl GptqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(QuantError::Config("gptq block size must be positive".into()));
        }
        if !(self.damp >= 0.0 && self.damp.is_finite()) {
            return Err(QuantError::Config(format!("gptq damping must be non-negative, got {}", self.damp)));
        }
        Ok(())
    }
}

/// Accumulates `H = 2·XᵀX` over calibration batches in f64.
#[derive(Clone, Debug)]
pub struct HessianAccumulator {
    h: Array2<f64>,
    samples: usize,
}

impl HessianAccumulator {
    pub fn new(c_in: usize) -> Self {
        Self { h: Array2::zeros((c_in, c_in)), samples: 0 }
    }

    pub fn add(&mut self, x: ArrayView2<f32>) -> Result<()> {
        if x.ncols() != self.h.nrows() {
            return Err(QuantError::Shape(format!("batch width {} != {}", x.ncols(), self.h.nrows())));
        }
        let x64 = x.mapv(f64::from);
        self.h.scaled_add(2.0, &x64.t().dot(&x64));
        self.samples += x.nrows();
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn hessian(&self) -> &Array2<f64> {
        &self.h
    }

    pub fn into_hessian(self) -> Array2<f64> {
        self.h
    }
}

/// Quantizes `w` (`C_in × C_out`) row by row in input order, pushing each
/// row's rounding error onto the rows not yet quantized.
///
/// Step sizes are per output column of the unmodified `w`, so a Hessian
/// proportional to the identity reproduces round-to-nearest exactly.
pub fn gptq_quantize(
    w: ArrayView2<f32>,
    hessian: &Array2<f64>,
    q_max: i32,
    cfg: &GptqConfig,
) -> Result<(Array2<i32>, Vec<f32>)> {
    cfg.validate()?;
    let (n, c_out) = w.dim();
    if hessian.dim() != (n, n) {
        return Err(QuantError::Shape(format!("hessian {:?} does not match {n} input rows", hessian.dim())));
    }
    if hessian.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::Numeric("non-finite hessian".into()));
    }
    let scales = weight_scales_per_channel(w, q_max);
    let mut work = w.mapv(f64::from);
    let mut h = hessian.clone();
    for i in 0..n {
        if h[[i, i]] == 0.0 {
            h[[i, i]] = 1.0;
            work.row_mut(i).fill(0.0);
        }
    }
    let mean_diag = (0..n).map(|i| h[[i, i]]).sum::<f64>() / n.max(1) as f64;
    let damp = cfg.damp * mean_diag;
    for i in 0..n {
        h[[i, i]] += damp;
    }
    let u = cholesky_upper(&spd_inverse(&h)?)?;

    let mut ints = Array2::<i32>::zeros((n, c_out));
    let mut start = 0;
    while start < n {
        let end = (start + cfg.block_size).min(n);
        let mut errs = Array2::<f64>::zeros((end - start, c_out));
        for i in start..end {
            let d = u[[i, i]];
            for c in 0..c_out {
                let v = work[[i, c]];
                let q = quantize_value(v as f32, scales[c], q_max);
                ints[[i, c]] = q;
                errs[[i - start, c]] = (v - q as f64 * scales[c] as f64) / d;
            }
            let err_row = errs.row(i - start).to_owned();
            for j in i + 1..end {
                let f = u[[i, j]];
                if f != 0.0 {
                    work.row_mut(j).scaled_add(-f, &err_row);
                }
            }
        }
        if end < n {
            let coupling = u.slice(s![start..end, end..]);
            let update = coupling.t().dot(&errs);
            let mut rest = work.slice_mut(s![end.., ..]);
            rest -= &update;
        }
        start = end;
    }
    Ok((ints, scales))
}

/// `tr((W - Ŵ)ᵀ H (W - Ŵ)) / 2`, the calibration-set output error the solver minimizes.
pub fn hessian_error(w: ArrayView2<f32>, w_hat: ArrayView2<f32>, hessian: &Array2<f64>) -> f64 {
    let d = (&w.mapv(f64::from) - &w_hat.mapv(f64::from)).to_owned();
    let hd = hessian.dot(&d);
    0.5 * d.iter().zip(hd.iter()).map(|(a, b)| a * b).sum::<f64>()
}
