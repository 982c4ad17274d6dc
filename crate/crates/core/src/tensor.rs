//! Dense tensors, 4-bit packing, and the `.qtz` container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "QTZ1" | u64 header_len | header (UTF-8 JSON) | zero padding | payload
//! ```
//!
//! The payload starts at the first 64-byte boundary after the header and
//! every tensor buffer inside it is itself 64-byte aligned. The header maps
//! tensor name to `{byte_length, byte_offset, dtype, shape}` with offsets
//! relative to the payload start; keys are serialized in sorted order, so
//! equal tensor maps always produce byte-identical files. An empty map is
//! written as the bare 12-byte prefix with `header_len = 0`.
//!
//! 4-bit values are packed two per byte: even index in the low nibble, odd
//! index in the high nibble, each stored as `value + 8`. An odd trailing
//! element is padded with the bias nibble 8.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};

pub const MAGIC: &[u8; 4] = b"QTZ1";
pub const ALIGN: usize = 64;
const PREFIX_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    PackedI4,
    /// Opaque bytes, used for embedded UTF-8 JSON documents.
    U8,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    PackedI4(Vec<u8>),
    U8(Vec<u8>),
}

/// Named, row-major tensor. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_name_shape(name: &str, shape: &[usize]) -> Result<()> {
    if name.is_empty() {
        return Err(QuantError::Format("tensor name is empty".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(QuantError::Shape(format!("tensor {name}: dimensions must be positive, got {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        check_name_shape(&name, &shape)?;
        if element_count(&shape) != data.len() {
            return Err(QuantError::Shape(format!(
                "tensor {name}: shape {shape:?} needs {} elements, got {}",
                element_count(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::Numeric(format!("tensor {name}: non-finite value at index {i}")));
        }
        Ok(Self { name, shape, data: TensorData::F32(data) })
    }

    /// Packs `values` (each in [-7, 7]) into a `PackedI4` tensor of `shape`.
    pub fn packed_i4(name: impl Into<String>, shape: Vec<usize>, values: &[i8]) -> Result<Self> {
        let name = name.into();
        check_name_shape(&name, &shape)?;
        if element_count(&shape) != values.len() {
            return Err(QuantError::Shape(format!(
                "tensor {name}: shape {shape:?} needs {} elements, got {}",
                element_count(&shape),
                values.len()
            )));
        }
        let bytes = pack_i4(values)?;
        Ok(Self { name, shape, data: TensorData::PackedI4(bytes) })
    }

    pub fn bytes(name: impl Into<String>, data: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let shape = vec![data.len().max(1)];
        check_name_shape(&name, &shape)?;
        if data.is_empty() {
            return Err(QuantError::Shape(format!("tensor {name}: byte tensors must be non-empty")));
        }
        Ok(Self { name, shape, data: TensorData::U8(data) })
    }

    pub fn from_matrix(name: impl Into<String>, m: ArrayView2<f32>) -> Result<Self> {
        let shape = vec![m.nrows(), m.ncols()];
        Tensor::f32(name, shape, m.iter().copied().collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        element_count(&self.shape)
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::PackedI4(_) => DType::PackedI4,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(QuantError::Format(format!("tensor {} is not F32", self.name))),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(QuantError::Format(format!("tensor {} is not U8", self.name))),
        }
    }

    /// Unpacked integers of a `PackedI4` tensor.
    pub fn to_i4(&self) -> Result<Vec<i8>> {
        match &self.data {
            TensorData::PackedI4(b) => unpack_i4(b, self.numel()),
            _ => Err(QuantError::Format(format!("tensor {} is not PackedI4", self.name))),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f32>> {
        if self.shape.len() != 2 {
            return Err(QuantError::Shape(format!("tensor {} has shape {:?}, expected 2-D", self.name, self.shape)));
        }
        let data = self.as_f32()?.to_vec();
        Array2::from_shape_vec((self.shape[0], self.shape[1]), data)
            .map_err(|e| QuantError::Shape(format!("tensor {}: {e}", self.name)))
    }

    fn raw_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::PackedI4(b) | TensorData::U8(b) => b.clone(),
        }
    }

    fn byte_len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len() * 4,
            TensorData::PackedI4(b) | TensorData::U8(b) => b.len(),
        }
    }
}

/// Packs symmetric 4-bit integers, two per byte.
pub fn pack_i4(values: &[i8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len().div_ceil(2));
    for (pair_idx, pair) in values.chunks(2).enumerate() {
        let mut nibbles = [8u8; 2];
        for (k, &v) in pair.iter().enumerate() {
            if !(-7..=7).contains(&v) {
                return Err(QuantError::Range { index: pair_idx * 2 + k, value: v as i32 });
            }
            nibbles[k] = (v + 8) as u8;
        }
        out.push(nibbles[0] | (nibbles[1] << 4));
    }
    Ok(out)
}

/// Inverse of [`pack_i4`] for the first `count` values of `buf`.
pub fn unpack_i4(buf: &[u8], count: usize) -> Result<Vec<i8>> {
    if buf.len() < count.div_ceil(2) {
        return Err(QuantError::Corrupt(format!(
            "packed buffer holds {} bytes, {} values need {}",
            buf.len(),
            count,
            count.div_ceil(2)
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let byte = buf[i / 2];
        let nibble = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
        if nibble == 0 {
            return Err(QuantError::Corrupt(format!("nibble at index {i} decodes to -8")));
        }
        out.push(nibble as i8 - 8);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    byte_length: usize,
    byte_offset: usize,
    dtype: DType,
    shape: Vec<usize>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Tensor map keyed by name. `BTreeMap` keeps iteration (and file) order sorted.
pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode_container(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut manifest = BTreeMap::new();
    let mut offset = 0usize;
    for (key, t) in tensors {
        if key != t.name() {
            return Err(QuantError::Format(format!("map key {key} does not match tensor name {}", t.name())));
        }
        let len = t.byte_len();
        manifest.insert(
            key.clone(),
            ManifestEntry { byte_length: len, byte_offset: offset, dtype: t.dtype(), shape: t.shape().to_vec() },
        );
        offset = align_up(offset + len);
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    if tensors.is_empty() {
        out.extend_from_slice(&0u64.to_le_bytes());
        return Ok(out);
    }
    let header = serde_json::to_vec(&manifest)?;
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(align_up(out.len()), 0);
    let payload_start = out.len();
    for (key, t) in tensors {
        let entry = &manifest[key];
        out.resize(payload_start + entry.byte_offset, 0);
        out.extend_from_slice(&t.raw_bytes());
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < PREFIX_LEN || &bytes[..4] != MAGIC {
        return Err(QuantError::Format("bad magic, not a QTZ1 container".into()));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    if header_len == 0 {
        return Ok(TensorMap::new());
    }
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| QuantError::Format("header extends past end of file".into()))?;
    let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| QuantError::Format(format!("malformed manifest JSON: {e}")))?;
    let payload_start = align_up(header_end);
    let payload = bytes.get(payload_start..).unwrap_or(&[]);

    let mut ranges: Vec<(usize, usize, &str)> = Vec::with_capacity(manifest.len());
    for (name, e) in &manifest {
        let end = e
            .byte_offset
            .checked_add(e.byte_length)
            .ok_or_else(|| QuantError::Format(format!("tensor {name}: byte range overflows")))?;
        if end > payload.len() {
            return Err(QuantError::Format(format!("tensor {name}: truncated payload")));
        }
        ranges.push((e.byte_offset, end, name));
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(QuantError::Format(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }

    let mut out = TensorMap::new();
    for (name, e) in manifest {
        let raw = &payload[e.byte_offset..e.byte_offset + e.byte_length];
        let n = element_count(&e.shape);
        let tensor = match e.dtype {
            DType::F32 => {
                if e.byte_length != n * 4 {
                    return Err(QuantError::Format(format!("tensor {name}: F32 length mismatch")));
                }
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Tensor::f32(name.clone(), e.shape, data)?
            }
            DType::PackedI4 => {
                if e.byte_length != n.div_ceil(2) {
                    return Err(QuantError::Format(format!("tensor {name}: PackedI4 length mismatch")));
                }
                check_name_shape(&name, &e.shape)?;
                // validates every nibble
                unpack_i4(raw, n)?;
                Tensor { name: name.clone(), shape: e.shape, data: TensorData::PackedI4(raw.to_vec()) }
            }
            DType::U8 => {
                if e.byte_length != n {
                    return Err(QuantError::Format(format!("tensor {name}: U8 length mismatch")));
                }
                Tensor::bytes(name.clone(), raw.to_vec())?
            }
        };
        out.insert(name, tensor);
    }
    Ok(out)
}

pub fn write_container(tensors: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_container(tensors)?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode_container(&fs::read(path)?)
}

/// Inserts `t` under its own name, rejecting duplicates.
pub fn insert_unique(map: &mut TensorMap, t: Tensor) -> Result<()> {
    let name = t.name().to_string();
    if map.contains_key(&name) {
        return Err(QuantError::Format(format!("duplicate tensor name {name}")));
    }
    map.insert(name, t);
    Ok(())
}

pub fn get<'a>(map: &'a TensorMap, name: &str) -> Result<&'a Tensor> {
    map.get(name).ok_or_else(|| QuantError::Missing(format!("tensor {name}")))
}
