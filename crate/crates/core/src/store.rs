//! Binary embedding container.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `CALM`                            |
//! | 4      | 4    | version `u32` = 1                       |
//! | 8      | 4    | dtype `u32`: 0 = `f32`, 1 = `f64`       |
//! | 12     | 8    | rows `u64`                              |
//! | 20     | 8    | dim `u64`                               |
//! | 28     | ...  | `rows × dim` values, row-major          |
//!
//! Embedding corpora use `f32`; checkpoints store parameters as `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CalmError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CALM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(CalmError::format("dtype", format!("unsupported dtype code {other}"))),
        }
    }
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [n] => Ok((1, *n)),
        other => Err(CalmError::Dimension {
            op: "store",
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Serializes a rank-1 or rank-2 tensor.
pub fn encode_store(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    if !t.all_finite() {
        return Err(CalmError::NumericDomain("refusing to store non-finite values".into()));
    }
    let (rows, dim) = matrix_dims(t)?;
    let mut out = Vec::with_capacity(HEADER_LEN + t.numel() * dtype.width() as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses one record from the front of `bytes`, returning the matrix and the
/// number of bytes consumed.
pub fn decode_store_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(CalmError::format(
            "header",
            format!("truncated: {} of {HEADER_LEN} header bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CalmError::format("magic", format!("expected CALM, found {:?}", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(CalmError::format("version", format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(u32_at(bytes, 8))?;
    let rows = u64_at(bytes, 12);
    let dim = u64_at(bytes, 20);
    let payload = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(dtype.width()))
        .filter(|&n| n <= (usize::MAX - HEADER_LEN) as u64)
        .ok_or_else(|| CalmError::format("rows", format!("{rows} x {dim} overflows")))?
        as usize;
    let total = HEADER_LEN + payload;
    if bytes.len() < total {
        return Err(CalmError::format(
            "payload",
            format!("truncated: expected {total} bytes for {rows} x {dim}, found {}", bytes.len()),
        ));
    }
    let body = &bytes[HEADER_LEN..total];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let t = Tensor::matrix(rows as usize, dim as usize, data)?;
    Ok((t, total))
}

/// Parses a complete store; trailing bytes are an error.
pub fn decode_store(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_store_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CalmError::format(
            "payload",
            format!("expected {used} bytes, found {}", bytes.len()),
        ));
    }
    Ok(t)
}

/// Writes via a sibling temporary file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| CalmError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CalmError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CalmError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CalmError::io(path, e))
}

/// Writes an `f32` store.
pub fn write_store(path: impl AsRef<Path>, matrix: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_store(matrix, Dtype::F32)?)
}

/// Reads a store, widening to `f64`.
pub fn read_store(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CalmError::io(path, e))?;
    decode_store(&bytes)
}
