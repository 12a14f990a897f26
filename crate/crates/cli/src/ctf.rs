//! CTF tensor files.
//!
//! Layout (little-endian):
//! - magic: `b"CARE"`
//! - version: u32 = 1
//! - dtype: u8 (0 = f32, 1 = f64)
//! - ndim: u8
//! - dims: ndim × u64
//! - payload: product(dims) values, row-major
//!
//! Writers default to f64. f32 payloads are widened on read.

use std::fs;
use std::path::Path;

use care_core::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CARE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    /// Precision the tensor was read from, or will be written as.
    pub dtype: DType,
}

impl Tensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
            dtype: DType::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn into_matrix(self) -> std::result::Result<Matrix, String> {
        match self.dims.as_slice() {
            &[r, c] => Matrix::new(r, c, self.data).map_err(|e| e.to_string()),
            d => Err(format!("expected a 2-d tensor, found {} dims", d.len())),
        }
    }
}

pub fn encode(t: &Tensor) -> std::result::Result<Vec<u8>, String> {
    if t.dims.len() > u8::MAX as usize {
        return Err(format!("{} dims exceed the format limit", t.dims.len()));
    }
    if t.numel() != t.data.len() {
        return Err(format!(
            "dims {:?} describe {} values, have {}",
            t.dims,
            t.numel(),
            t.data.len()
        ));
    }
    let mut out = Vec::with_capacity(10 + 8 * t.dims.len() + t.dtype.size() * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype.code());
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.dtype {
        DType::F64 => t
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err("not a CTF file (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported CTF version {version}"));
    }
    let dtype =
        DType::from_code(bytes[8]).ok_or_else(|| format!("unknown dtype code {}", bytes[8]))?;
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let dims: Vec<usize> = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dims overflow")?;
    let payload = &bytes[header..];
    if Some(payload.len()) != numel.checked_mul(dtype.size()) {
        return Err(format!(
            "payload is {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            numel.saturating_mul(dtype.size())
        ));
    }
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(Tensor { dims, data, dtype })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::format(path, m))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t).map_err(|m| CliError::format(path, m))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_tensor(path)?
        .into_matrix()
        .map_err(|m| CliError::format(path, m))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor {
            dims: vec![2, 1],
            data: vec![1.0, -2.0],
            dtype: DType::F64,
        };
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"CARE");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..34], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 42);
    }

    #[test]
    fn f32_widens_on_read() {
        let t = Tensor {
            dims: vec![3],
            data: vec![0.5, 1.25, -3.0],
            dtype: DType::F32,
        };
        let b = encode(&t).unwrap();
        assert_eq!(b.len(), 10 + 8 + 12);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor {
            dims: vec![2, 2],
            data: vec![0.0; 4],
            dtype: DType::F64,
        };
        let b = encode(&t).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(decode(&bad).is_err());
        let mut bad = b;
        bad[8] = 7;
        assert!(decode(&bad).is_err());
        assert!(encode(&Tensor {
            dims: vec![3],
            data: vec![0.0; 2],
            dtype: DType::F64
        })
        .is_err());
    }

    #[test]
    fn scalar_and_empty() {
        for t in [
            Tensor {
                dims: vec![],
                data: vec![4.0],
                dtype: DType::F64,
            },
            Tensor {
                dims: vec![0, 5],
                data: vec![],
                dtype: DType::F64,
            },
        ] {
            assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
        }
    }
}
