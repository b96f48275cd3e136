//! PAVF: a minimal little-endian float32 tensor container.
//!
//! Layout:
//! - magic: `b"PAVF"`
//! - version: u32 (currently 1)
//! - rank: u32 (1 or 2)
//! - dims: rank × u32, each ≥ 1
//! - payload: product(dims) × f32, row-major

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PAVF";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 12;

/// A rank-1 or rank-2 float32 tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PavfTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl PavfTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Format(format!("rank must be 1 or 2, got {}", shape.len())));
        }
        if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Format(format!("dims must be in 1..=u32::MAX, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Converts from f64 storage; values are rounded to the nearest f32.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some((index, v)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: *v as f64,
            });
        }
        let mut out = Vec::with_capacity(HEADER_FIXED + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_FIXED {
            return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rank = word(8) as usize;
        if !(1..=2).contains(&rank) {
            return Err(Error::Format(format!("rank must be 1 or 2, got {rank}")));
        }
        let payload_at = HEADER_FIXED + 4 * rank;
        if bytes.len() < payload_at {
            return Err(Error::Format("truncated dims".into()));
        }
        let shape: Vec<usize> = (0..rank).map(|i| word(HEADER_FIXED + 4 * i) as usize).collect();
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let expected = n
            .checked_mul(4)
            .and_then(|p| p.checked_add(payload_at))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload length mismatch: dims {shape:?} need {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let data = bytes[payload_at..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(shape, data)
    }
}

pub fn write_tensor(t: &PavfTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<PavfTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PavfTensor::from_bytes(&bytes)
}
