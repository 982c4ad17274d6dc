//! Symmetric uniform quantization and the fake-quantized linear layer.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::calibration::ScaleTable;
use crate::error::{QuantError, Result};
use crate::rotation::RotationPlan;

/// Bit-widths for weights and activations.
///
/// Widths above 8 are accepted so that a "quantization vanishes" reference
/// (e.g. 16 bits) can run through the same code path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { weight_bits: 4, act_bits: 4 }
    }
}

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// `2^(k-1) - 1`.
pub fn q_max(bits: u32) -> Result<i32> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(QuantError::Config(format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    Ok((1i32 << (bits - 1)) - 1)
}

impl QuantConfig {
    pub fn new(weight_bits: u32, act_bits: u32) -> Result<Self> {
        q_max(weight_bits)?;
        q_max(act_bits)?;
        Ok(Self { weight_bits, act_bits })
    }

    pub fn weight_q_max(&self) -> i32 {
        q_max(self.weight_bits).expect("validated bit-width")
    }

    pub fn act_q_max(&self) -> i32 {
        q_max(self.act_bits).expect("validated bit-width")
    }
}

/// `clamp(round_half_even(z / Δ), -q_max, q_max)`.
#[inline]
pub fn quantize_value(z: f32, delta: f32, q_max: i32) -> i32 {
    let q = (z / delta).round_ties_even();
    q.clamp(-(q_max as f32), q_max as f32) as i32
}

fn check_finite(values: impl IntoIterator<Item = f32>, what: &str) -> Result<()> {
    for (i, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::Numeric(format!("{what}: non-finite value at index {i}")));
        }
    }
    Ok(())
}

fn check_scale(delta: f32) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(QuantError::Numeric(format!("scale must be positive and finite, got {delta}")));
    }
    Ok(())
}

/// Quantizes a flat tensor with a single scale.
pub fn quantize_symmetric(z: &[f32], delta: f32, q_max: i32) -> Result<Vec<i32>> {
    check_scale(delta)?;
    check_finite(z.iter().copied(), "quantize input")?;
    Ok(z.iter().map(|&v| quantize_value(v, delta, q_max)).collect())
}

/// Quantizes each column `j` of `z` with `scales[j]`.
pub fn quantize_columns(z: ArrayView2<f32>, scales: &[f32], q_max: i32) -> Result<Array2<i32>> {
    if scales.len() != z.ncols() {
        return Err(QuantError::Shape(format!("{} column scales for {} columns", scales.len(), z.ncols())));
    }
    scales.iter().try_for_each(|&d| check_scale(d))?;
    check_finite(z.iter().copied(), "quantize input")?;
    Ok(Array2::from_shape_fn(z.dim(), |(i, j)| quantize_value(z[[i, j]], scales[j], q_max)))
}

/// Quantizes each row `i` of `z` with `scales[i]`.
pub fn quantize_rows(z: ArrayView2<f32>, scales: &[f32], q_max: i32) -> Result<Array2<i32>> {
    if scales.len() != z.nrows() {
        return Err(QuantError::Shape(format!("{} row scales for {} rows", scales.len(), z.nrows())));
    }
    scales.iter().try_for_each(|&d| check_scale(d))?;
    check_finite(z.iter().copied(), "quantize input")?;
    Ok(Array2::from_shape_fn(z.dim(), |(i, j)| quantize_value(z[[i, j]], scales[i], q_max)))
}

fn peak_scale<'a>(values: impl Iterator<Item = &'a f32>, q_max: i32) -> f32 {
    let peak = values.fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        peak / q_max as f32
    } else {
        1.0
    }
}

/// `Δ_j = max_i |W'_ij| / q_max` per output channel; all-zero columns get 1.
pub fn weight_scales_per_channel(w: ArrayView2<f32>, q_max: i32) -> Vec<f32> {
    w.axis_iter(Axis(1)).map(|col| peak_scale(col.iter(), q_max)).collect()
}

/// `Δ_t = max_c |X'_tc| / q_max` per token; all-zero rows get 1.
pub fn activation_scales_per_token(x: ArrayView2<f32>, q_max: i32) -> Vec<f32> {
    x.axis_iter(Axis(0)).map(|row| peak_scale(row.iter(), q_max)).collect()
}

/// Round-to-nearest weight quantization: per-channel scales and integers.
pub fn rtn_quantize(w: ArrayView2<f32>, q_max: i32) -> Result<(Array2<i32>, Vec<f32>)> {
    let scales = weight_scales_per_channel(w, q_max);
    let ints = quantize_columns(w, &scales, q_max)?;
    Ok((ints, scales))
}

pub fn dequantize_columns(ints: &Array2<i32>, scales: &[f32]) -> Array2<f32> {
    Array2::from_shape_fn(ints.dim(), |(i, j)| ints[[i, j]] as f32 * scales[j])
}

/// How a layer's input activations are scaled at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationScaleMode {
    /// Per-token scale computed on the fly.
    DynamicPerToken,
    /// Per-step, per-channel scale looked up in a calibrated table.
    TablePerStep,
}

/// A linear layer in the rotated, quantized basis.
#[derive(Clone, Debug)]
pub struct QuantizedLayer {
    name: String,
    config: QuantConfig,
    ints: Array2<i32>,
    weight_scales: Vec<f32>,
    bias: Option<Vec<f32>>,
    rotation: RotationPlan,
    act_mode: ActivationScaleMode,
    dequant: Array2<f32>,
}

impl QuantizedLayer {
    pub fn new(
        name: impl Into<String>,
        config: QuantConfig,
        ints: Array2<i32>,
        weight_scales: Vec<f32>,
        bias: Option<Vec<f32>>,
        rotation: RotationPlan,
        act_mode: ActivationScaleMode,
    ) -> Result<Self> {
        let name = name.into();
        let (c_in, c_out) = ints.dim();
        if weight_scales.len() != c_out {
            return Err(QuantError::Shape(format!("{name}: {} scales for {c_out} output channels", weight_scales.len())));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(QuantError::Shape(format!("{name}: bias has {} entries, expected {c_out}", b.len())));
            }
        }
        if rotation.c_in() != c_in {
            return Err(QuantError::Shape(format!("{name}: plan width {} != {c_in}", rotation.c_in())));
        }
        if let Some(&d) = weight_scales.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
            return Err(QuantError::Numeric(format!("{name}: weight scale {d} is not positive")));
        }
        let qm = config.weight_q_max();
        if ints.iter().any(|&q| q.abs() > qm) {
            return Err(QuantError::Range { index: 0, value: *ints.iter().find(|&&q| q.abs() > qm).unwrap() });
        }
        let dequant = dequantize_columns(&ints, &weight_scales);
        Ok(Self { name, config, ints, weight_scales, bias, rotation, act_mode, dequant })
    }

    /// Rotates `w`, then quantizes it with RTN.
    pub fn from_weight_rtn(
        name: impl Into<String>,
        config: QuantConfig,
        w: ArrayView2<f32>,
        bias: Option<Vec<f32>>,
        rotation: RotationPlan,
        act_mode: ActivationScaleMode,
    ) -> Result<Self> {
        let rotated = rotation.apply_to_weight(w)?;
        let (ints, scales) = rtn_quantize(rotated.view(), config.weight_q_max())?;
        Self::new(name, config, ints, scales, bias, rotation, act_mode)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn ints(&self) -> &Array2<i32> {
        &self.ints
    }

    pub fn weight_scales(&self) -> &[f32] {
        &self.weight_scales
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn rotation(&self) -> &RotationPlan {
        &self.rotation
    }

    pub fn act_mode(&self) -> ActivationScaleMode {
        self.act_mode
    }

    pub fn c_in(&self) -> usize {
        self.ints.nrows()
    }

    pub fn c_out(&self) -> usize {
        self.ints.ncols()
    }

    /// `Δ_W' ⊙ Q_W'` in the rotated basis.
    pub fn dequantized_weight(&self) -> &Array2<f32> {
        &self.dequant
    }
}

/// Quantize-dequantize of rotated activations per the layer's mode.
pub fn fake_quant_activation(
    xr: ArrayView2<f32>,
    layer: &QuantizedLayer,
    step: Option<usize>,
    table: Option<&ScaleTable>,
) -> Result<Array2<f32>> {
    let qm = layer.config.act_q_max();
    match layer.act_mode {
        ActivationScaleMode::DynamicPerToken => {
            check_finite(xr.iter().copied(), &layer.name)?;
            let scales = activation_scales_per_token(xr, qm);
            let q = quantize_rows(xr, &scales, qm)?;
            Ok(Array2::from_shape_fn(q.dim(), |(i, j)| q[[i, j]] as f32 * scales[i]))
        }
        ActivationScaleMode::TablePerStep => {
            let (step, table) = match (step, table) {
                (Some(s), Some(t)) => (s, t),
                _ => {
                    return Err(QuantError::Config(format!(
                        "layer {} uses per-step activation scales but no step/table was given",
                        layer.name
                    )))
                }
            };
            let scales = table.scales(&layer.name, step)?;
            if scales.len() != xr.ncols() {
                return Err(QuantError::Shape(format!(
                    "table for {} has {} channels, activation has {}",
                    layer.name,
                    scales.len(),
                    xr.ncols()
                )));
            }
            let q = quantize_columns(xr, scales, qm)?;
            Ok(Array2::from_shape_fn(q.dim(), |(i, j)| q[[i, j]] as f32 * scales[j]))
        }
    }
}

/// `(Δ_X' ⊙ Q_X')·(Δ_W' ⊙ Q_W') + b`, integers materialized and arithmetic in f32.
pub fn fake_quant_linear(
    x: ArrayView2<f32>,
    layer: &QuantizedLayer,
    step: Option<usize>,
    table: Option<&ScaleTable>,
) -> Result<Array2<f32>> {
    let xr = layer.rotation.apply_to_activation(x)?;
    let xq = fake_quant_activation(xr.view(), layer, step, table)?;
    let mut y = xq.dot(&layer.dequant);
    if let Some(b) = &layer.bias {
        for mut row in y.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::RotationKind;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_symmetric(&[7.0, -3.5, 0.0], 1.0, 7).unwrap(), vec![7, -4, 0]);
        assert_eq!(quantize_symmetric(&[100.0], 1.0, 7).unwrap(), vec![7]);
        assert_eq!(quantize_symmetric(&[2.5, -2.5, 0.5], 1.0, 7).unwrap(), vec![2, -2, 0]);
        assert!(quantize_symmetric(&[f32::NAN], 1.0, 7).is_err());
        assert!(quantize_symmetric(&[1.0], 0.0, 7).is_err());
    }

    #[test]
    fn rounding_bound_on_random_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let delta = z.iter().fold(0.0f32, |m, v| m.max(v.abs())) / 7.0;
        let q = quantize_symmetric(&z, delta, 7).unwrap();
        for (&v, &qi) in z.iter().zip(&q) {
            assert!((qi as f32 * delta - v).abs() <= delta / 2.0 + 1e-7);
        }
    }

    #[test]
    fn bit_width_bounds() {
        assert_eq!(q_max(4).unwrap(), 7);
        assert_eq!(q_max(8).unwrap(), 127);
        assert_eq!(q_max(2).unwrap(), 1);
        assert!(q_max(1).is_err());
        assert!(q_max(17).is_err());
        assert!(QuantConfig::new(4, 0).is_err());
    }

    #[test]
    fn weight_scale_examples() {
        let w = array![[6.0f32, 0.0], [-14.0, 0.0]];
        let scales = weight_scales_per_channel(w.view(), 7);
        assert_eq!(scales, vec![2.0, 1.0]);
        let (ints, scales) = rtn_quantize(w.view(), 7).unwrap();
        assert_eq!(ints.column(1).to_vec(), vec![0, 0]);
        assert_eq!(dequantize_columns(&ints, &scales), w);
    }

    #[test]
    fn per_column_reconstruction_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array2::from_shape_fn((64, 8), |_| rng.gen_range(-2.0f32..2.0));
        let (ints, scales) = rtn_quantize(w.view(), 7).unwrap();
        let d = dequantize_columns(&ints, &scales);
        for j in 0..8 {
            let err = (0..64).map(|i| (d[[i, j]] - w[[i, j]]).abs()).fold(0.0f32, f32::max);
            assert!(err <= scales[j] / 2.0 + 1e-6);
        }
    }

    #[test]
    fn token_scale_examples() {
        let x = array![[0.0f32, 0.0], [-21.0, 7.0]];
        assert_eq!(activation_scales_per_token(x.view(), 7), vec![1.0, 3.0]);
    }

    fn layer(w: &Array2<f32>, bits: u32, kind: RotationKind, bias: Option<Vec<f32>>) -> QuantizedLayer {
        let plan = RotationPlan::build(w.view(), kind, 16).unwrap();
        QuantizedLayer::from_weight_rtn(
            "l",
            QuantConfig::new(bits, bits).unwrap(),
            w.view(),
            bias,
            plan,
            ActivationScaleMode::DynamicPerToken,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((32, 4), |_| rng.gen_range(-1.0f32..1.0));
        let b = vec![0.5, -1.0, 2.0, 0.0];
        let l = layer(&w, 4, RotationKind::SvdHadamard, Some(b.clone()));
        let y = fake_quant_linear(Array2::zeros((3, 32)).view(), &l, None, None).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), b);
        }
    }

    #[test]
    fn wide_bits_match_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Array2::from_shape_fn((32, 8), |_| rng.gen_range(-1.0f32..1.0));
        let x = Array2::from_shape_fn((5, 32), |_| rng.gen_range(-1.0f32..1.0));
        let l = layer(&w, 16, RotationKind::SvdHadamard, None);
        let y = fake_quant_linear(x.view(), &l, None, None).unwrap();
        let r = x.dot(&w);
        let num: f32 = (&y - &r).iter().map(|v| v * v).sum::<f32>().sqrt();
        let den: f32 = r.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(num / den < 1e-3);
    }

    #[test]
    fn table_mode_requires_step_and_table() {
        let w = Array2::<f32>::ones((16, 2));
        let plan = RotationPlan::identity(16, 16);
        let l = QuantizedLayer::from_weight_rtn("l", QuantConfig::default(), w.view(), None, plan, ActivationScaleMode::TablePerStep)
            .unwrap();
        assert!(matches!(fake_quant_linear(Array2::zeros((1, 16)).view(), &l, None, None), Err(QuantError::Config(_))));
    }

    #[test]
    fn layer_validation() {
        let plan = RotationPlan::identity(2, 2);
        let ints = array![[1, 2], [3, 4]];
        assert!(QuantizedLayer::new("l", QuantConfig::default(), ints.clone(), vec![1.0], None, plan.clone(), ActivationScaleMode::DynamicPerToken).is_err());
        assert!(QuantizedLayer::new("l", QuantConfig::default(), ints.clone(), vec![1.0, 0.0], None, plan.clone(), ActivationScaleMode::DynamicPerToken).is_err());
        assert!(QuantizedLayer::new("l", QuantConfig::default(), array![[9, 0], [0, 0]], vec![1.0, 1.0], None, plan, ActivationScaleMode::DynamicPerToken).is_err());
    }
}
