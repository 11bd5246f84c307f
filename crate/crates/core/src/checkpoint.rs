//! Named-tensor checkpoint container (`MRRW`).
//!
//! ```text
//! magic "MRRW" | version u16 | tensor count u32 |
//! per tensor: name len u32, utf-8 name, dtype u8 (0 = FP32, 1 = FP16),
//!             rank u8, dims u64 x rank, raw little-endian payload
//! ```
//!
//! Values are always handed back as `f64`; FP16 storage rounds each value to
//! the nearest half-precision number.

use std::fs;
use std::path::Path;

use half::f16;

use crate::error::{Error, FormatError, Result};
use crate::wire::{ByteReader, PutLe};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRRW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Fp32,
    Fp16,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::Fp32),
            1 => Some(Precision::Fp16),
            _ => None,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
        }
    }

    /// The value a stored number reads back as.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Fp32 => f64::from(v as f32),
            Precision::Fp16 => f64::from(f16::from_f64(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// An ordered set of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn extend(&mut self, other: Checkpoint) {
        self.tensors.extend(other.tensors);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| FormatError::InvalidField(format!("missing tensor {name:?}")).into())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Bytes of raw tensor payload, headers excluded.
    pub fn payload_bytes(&self, precision: Precision) -> usize {
        self.parameter_count() * precision.bytes_per_value()
    }

    /// Every value rounded as it would be after a save/load cycle.
    pub fn rounded(&self, precision: Precision) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| precision.round(*v)).collect(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self, precision: Precision) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.payload_bytes(precision));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.put_u16(CHECKPOINT_VERSION);
        out.put_u32(self.tensors.len() as u32);
        for t in &self.tensors {
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "tensor {:?} holds non-finite value at {i}; refusing to serialize",
                    t.name
                )));
            }
            if t.dims.len() > u8::MAX as usize || t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::invalid(format!(
                    "tensor {:?} has inconsistent dims",
                    t.name
                )));
            }
            out.put_u32(t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            out.put_u8(precision.tag());
            out.put_u8(t.dims.len() as u8);
            for d in &t.dims {
                out.put_u64(*d as u64);
            }
            match precision {
                Precision::Fp32 => {
                    for v in &t.data {
                        let x = *v as f32;
                        if !x.is_finite() {
                            return Err(Error::invalid(format!(
                                "tensor {:?} overflows FP32",
                                t.name
                            )));
                        }
                        out.put_f32(x);
                    }
                }
                Precision::Fp16 => {
                    for v in &t.data {
                        let x = f16::from_f64(*v);
                        if !x.is_finite() {
                            return Err(Error::invalid(format!(
                                "tensor {:?} overflows FP16",
                                t.name
                            )));
                        }
                        out.put_u16(x.to_bits());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let raw = r.u32("tensor count")?;
        let count = r.count(u64::from(raw), 8, "tensor table")?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| FormatError::InvalidField("tensor name is not utf-8".into()))?
                .to_string();
            let tag = r.u8("dtype")?;
            let precision = Precision::from_tag(tag)
                .ok_or_else(|| FormatError::InvalidField(format!("unknown dtype tag {tag}")))?;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u64("dims")?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| FormatError::InvalidField("tensor dims overflow".into()))?;
                dims.push(d as usize);
            }
            let numel = r.count(numel, precision.bytes_per_value(), "tensor payload")?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let v = match precision {
                    Precision::Fp32 => f64::from(r.f32("tensor payload")?),
                    Precision::Fp16 => f64::from(f16::from_bits(r.u16("tensor payload")?)),
                };
                if !v.is_finite() {
                    return Err(FormatError::InvalidField(format!(
                        "tensor {name:?} holds a non-finite value"
                    ))
                    .into());
                }
                data.push(v);
            }
            if tensors.iter().any(|t: &Tensor| t.name == name) {
                return Err(FormatError::InvalidField(format!("duplicate tensor {name:?}")).into());
            }
            tensors.push(Tensor { name, dims, data });
        }
        r.finish()?;
        Ok(Self { tensors })
    }

    /// Precision of every tensor in a serialized checkpoint, without decoding values.
    pub fn stored_precisions(bytes: &[u8]) -> Result<Vec<Precision>> {
        let ck = Self::from_bytes(bytes)?;
        // re-walk the header to report tags
        let mut r = ByteReader::new(bytes);
        r.take(10, "header")?;
        let mut out = Vec::with_capacity(ck.tensors.len());
        for t in &ck.tensors {
            let name_len = r.u32("name")? as usize;
            r.take(name_len, "name")?;
            let p = Precision::from_tag(r.u8("dtype")?).expect("validated above");
            let rank = r.u8("rank")? as usize;
            r.take(8 * rank, "dims")?;
            r.take(t.numel() * p.bytes_per_value(), "payload")?;
            out.push(p);
        }
        Ok(out)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, precision: Precision, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes(precision)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
