//! Block-wise SVD·Hadamard rotation with zigzag channel permutation.
//!
//! A plan transforms a linear layer `Y = X·W` (`W` is `C_in × C_out`) into
//! `Y = X'·W'` with `X' = X·P·R̂` and `W' = R̂ᵀ·Pᵀ·W`, where `P` is a channel
//! permutation and `R̂ = BlockDiag(R_1, …, R_K)` holds one `c × c` orthogonal
//! matrix per contiguous block of permuted input channels. Channels beyond
//! the last full block (when `c` does not divide `C_in`) pass through
//! unrotated.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::linalg::left_svd;
use crate::tensor::{get, Tensor, TensorMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationKind {
    Identity,
    #[serde(rename = "permute")]
    PermuteOnly,
    Svd,
    Hadamard,
    SvdHadamard,
}

impl RotationKind {
    pub const ALL: [RotationKind; 5] =
        [RotationKind::Identity, RotationKind::PermuteOnly, RotationKind::Svd, RotationKind::Hadamard, RotationKind::SvdHadamard];

    pub fn as_str(self) -> &'static str {
        match self {
            RotationKind::Identity => "identity",
            RotationKind::PermuteOnly => "permute",
            RotationKind::Svd => "svd",
            RotationKind::Hadamard => "hadamard",
            RotationKind::SvdHadamard => "svd-hadamard",
        }
    }

    fn uses_hadamard(self) -> bool {
        matches!(self, RotationKind::Hadamard | RotationKind::SvdHadamard)
    }

    fn uses_svd(self) -> bool {
        matches!(self, RotationKind::Svd | RotationKind::SvdHadamard)
    }

    /// Whether block matrices carry data that must be stored (Hadamard is implicit).
    pub fn stores_blocks(self) -> bool {
        self.uses_svd()
    }
}

impl fmt::Display for RotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RotationKind {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" | "raw" => Ok(RotationKind::Identity),
            "permute" | "permute-only" => Ok(RotationKind::PermuteOnly),
            "svd" => Ok(RotationKind::Svd),
            "hadamard" => Ok(RotationKind::Hadamard),
            "svd-hadamard" | "svdh" => Ok(RotationKind::SvdHadamard),
            other => Err(QuantError::Config(format!("unknown rotation kind {other:?}"))),
        }
    }
}

/// Per-block spectrum of the weight rows, in plan block order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralInfo {
    pub singular_values: Vec<Vec<f32>>,
    pub left_basis: Vec<Array2<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationPlan {
    kind: RotationKind,
    block_size: usize,
    perm: Vec<usize>,
    /// One `c × c` matrix per full block; empty for Identity/PermuteOnly.
    blocks: Vec<Array2<f32>>,
    spectral: Option<SpectralInfo>,
}

/// Normalized Sylvester–Hadamard matrix of order `n` (entries ±1/√n).
pub fn make_hadamard(n: usize) -> Result<Array2<f32>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(QuantError::Config(format!("Hadamard order must be a power of two, got {n}")));
    }
    let scale = 1.0 / (n as f64).sqrt();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if (i & j).count_ones() % 2 == 0 {
            scale as f32
        } else {
            -scale as f32
        }
    }))
}

/// Left singular basis `U` of a `c × n` block of weight rows.
///
/// Rows of `Uᵀ·W_b` have Euclidean norms equal to the singular values.
pub fn svd_rotation(block: ArrayView2<f32>) -> Result<(Array2<f32>, Vec<f32>)> {
    let svd = left_svd(block)?;
    Ok((svd.u.mapv(|v| v as f32), svd.singular_values.iter().map(|&v| v as f32).collect()))
}

/// Channel indices sorted by descending norm, ties by ascending index.
fn sort_by_norm(norms: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx
}

/// Deals already-sorted channels to `k` blocks serpentine-style and
/// concatenates the blocks.
fn deal_serpentine(sorted: &[usize], k: usize) -> Vec<usize> {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::with_capacity(sorted.len() / k.max(1)); k];
    for (rank, &ch) in sorted.iter().enumerate() {
        let pos = rank % (2 * k);
        let b = if pos < k { pos } else { 2 * k - 1 - pos };
        buckets[b].push(ch);
    }
    buckets.concat()
}

/// Zigzag permutation balancing channel energy across `k` blocks.
pub fn zigzag_permutation(norms: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || norms.len() % k != 0 {
        return Err(QuantError::Config(format!("{} channels cannot be split into {k} equal blocks", norms.len())));
    }
    Ok(deal_serpentine(&sort_by_norm(norms), k))
}

fn row_sq_norms(w: ArrayView2<f32>) -> Vec<f32> {
    w.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
}

impl RotationPlan {
    /// Plan that leaves both activations and weights untouched.
    pub fn identity(c_in: usize, block_size: usize) -> Self {
        Self { kind: RotationKind::Identity, block_size, perm: (0..c_in).collect(), blocks: Vec::new(), spectral: None }
    }

    /// Builds the plan for weight `w` (`C_in × C_out`).
    pub fn build(w: ArrayView2<f32>, kind: RotationKind, block_size: usize) -> Result<Self> {
        let c_in = w.nrows();
        if c_in == 0 || w.ncols() == 0 {
            return Err(QuantError::Shape(format!("cannot plan an empty weight {:?}", w.dim())));
        }
        if block_size == 0 {
            return Err(QuantError::Config("block size must be positive".into()));
        }
        if kind.uses_hadamard() && !block_size.is_power_of_two() {
            return Err(QuantError::Config(format!("block size {block_size} is not a power of two")));
        }
        if kind != RotationKind::Identity && block_size > c_in {
            return Err(QuantError::Config(format!("block size {block_size} exceeds input dimension {c_in}")));
        }
        if kind == RotationKind::Identity {
            return Ok(Self::identity(c_in, block_size));
        }

        let k = c_in / block_size;
        let full = k * block_size;
        let sorted = sort_by_norm(&row_sq_norms(w));
        // the lowest-energy remainder channels form the trailing pass-through block
        let mut perm = deal_serpentine(&sorted[..full], k);
        perm.extend_from_slice(&sorted[full..]);

        let mut plan = Self { kind, block_size, perm, blocks: Vec::new(), spectral: None };
        if kind == RotationKind::PermuteOnly {
            return Ok(plan);
        }

        let permuted = w.select(Axis(0), &plan.perm);
        let hadamard = if kind.uses_hadamard() { Some(make_hadamard(block_size)?) } else { None };
        let mut spectral = SpectralInfo { singular_values: Vec::new(), left_basis: Vec::new() };
        for b in 0..k {
            let rows = permuted.slice(s![b * block_size..(b + 1) * block_size, ..]);
            let block = if kind.uses_svd() {
                let (u, sigma) = svd_rotation(rows).map_err(|e| match e {
                    QuantError::Numeric(m) => QuantError::Numeric(format!("block {b}: {m}")),
                    other => other,
                })?;
                let r = match &hadamard {
                    Some(h) => u.dot(h),
                    None => u.clone(),
                };
                spectral.singular_values.push(sigma);
                spectral.left_basis.push(u);
                r
            } else {
                hadamard.clone().expect("hadamard kind")
            };
            plan.blocks.push(block);
        }
        if kind.uses_svd() {
            plan.spectral = Some(spectral);
        }
        Ok(plan)
    }

    pub fn kind(&self) -> RotationKind {
        self.kind
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn c_in(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Number of full rotated blocks.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Array2<f32>] {
        &self.blocks
    }

    pub fn spectral(&self) -> Option<&SpectralInfo> {
        self.spectral.as_ref()
    }

    fn check_width(&self, got: usize, what: &str) -> Result<()> {
        if got != self.c_in() {
            return Err(QuantError::Shape(format!("{what} has {got} input channels, plan expects {}", self.c_in())));
        }
        Ok(())
    }

    /// `X' = X·P·R̂` for `X` of shape `tokens × C_in`.
    pub fn apply_to_activation(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check_width(x.ncols(), "activation")?;
        if self.kind == RotationKind::Identity {
            return Ok(x.to_owned());
        }
        let mut out = x.select(Axis(1), &self.perm);
        let c = self.block_size;
        for (b, r) in self.blocks.iter().enumerate() {
            let rotated = out.slice(s![.., b * c..(b + 1) * c]).dot(r);
            out.slice_mut(s![.., b * c..(b + 1) * c]).assign(&rotated);
        }
        Ok(out)
    }

    /// `W' = R̂ᵀ·Pᵀ·W` for `W` of shape `C_in × C_out`.
    pub fn apply_to_weight(&self, w: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check_width(w.nrows(), "weight")?;
        if self.kind == RotationKind::Identity {
            return Ok(w.to_owned());
        }
        let mut out = w.select(Axis(0), &self.perm);
        let c = self.block_size;
        for (b, r) in self.blocks.iter().enumerate() {
            let rotated = r.t().dot(&out.slice(s![b * c..(b + 1) * c, ..]));
            out.slice_mut(s![b * c..(b + 1) * c, ..]).assign(&rotated);
        }
        Ok(out)
    }

    /// Dense `C_in × C_in` transform `T = P·R̂`, so that `X' = X·T`.
    pub fn full_transform(&self) -> Array2<f32> {
        let n = self.c_in();
        self.apply_to_activation(Array2::<f32>::eye(n).view()).expect("square identity matches plan width")
    }

    /// Tensors `rot/<layer>/perm` and `rot/<layer>/block<k>`; nothing for Identity.
    pub fn to_tensors(&self, layer: &str) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        if self.kind == RotationKind::Identity {
            return Ok(out);
        }
        out.push(Tensor::f32(
            format!("rot/{layer}/perm"),
            vec![self.c_in()],
            self.perm.iter().map(|&p| p as f32).collect(),
        )?);
        if self.kind.stores_blocks() {
            for (b, r) in self.blocks.iter().enumerate() {
                out.push(Tensor::from_matrix(format!("rot/{layer}/block{b}"), r.view())?);
            }
        }
        Ok(out)
    }

    /// Rebuilds a plan written by [`RotationPlan::to_tensors`].
    pub fn from_tensors(
        map: &TensorMap,
        layer: &str,
        kind: RotationKind,
        block_size: usize,
        c_in: usize,
    ) -> Result<Self> {
        if kind == RotationKind::Identity {
            return Ok(Self::identity(c_in, block_size));
        }
        let perm_f = get(map, &format!("rot/{layer}/perm"))?.as_f32()?;
        if perm_f.len() != c_in {
            return Err(QuantError::Shape(format!("rot/{layer}/perm has {} entries, expected {c_in}", perm_f.len())));
        }
        let perm: Vec<usize> = perm_f.iter().map(|&p| p as usize).collect();
        let mut seen = vec![false; c_in];
        for (&pf, &p) in perm_f.iter().zip(&perm) {
            if pf.fract() != 0.0 || pf < 0.0 || p >= c_in || seen[p] {
                return Err(QuantError::Corrupt(format!("rot/{layer}/perm is not a permutation")));
            }
            seen[p] = true;
        }
        let k = c_in / block_size;
        let blocks = match kind {
            RotationKind::PermuteOnly => Vec::new(),
            RotationKind::Hadamard => vec![make_hadamard(block_size)?; k],
            _ => (0..k)
                .map(|b| {
                    let m = get(map, &format!("rot/{layer}/block{b}"))?.to_matrix()?;
                    if m.dim() != (block_size, block_size) {
                        return Err(QuantError::Shape(format!("rot/{layer}/block{b} has shape {:?}", m.dim())));
                    }
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self { kind, block_size, perm, blocks, spectral: None })
    }
}

/// Largest deviation of `m·mᵀ` from the identity.
pub fn orthogonality_error(m: ArrayView2<f32>) -> f32 {
    let m64 = m.mapv(|v| v as f64);
    let p = m64.dot(&m64.t());
    let mut worst = 0.0f64;
    for ((i, j), v) in p.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst as f32
}
