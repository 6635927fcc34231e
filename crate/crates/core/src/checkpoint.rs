//! Versioned tensor container.
//!
//! Layout: the 8-byte magic `BBSCKPT\0`, a little-endian `u32` schema version,
//! a little-endian `u64` header length, a JSON header, then the raw
//! little-endian tensor payload. The header carries free-form metadata and a
//! table of `(name, shape, dtype, offset, nbytes)` records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BBSCKPT\0";
pub const SCHEMA_VERSION: u32 = 1;
/// Training checkpoints store optimizer moments under this name prefix.
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    metadata: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

pub fn save<'a>(
    path: impl AsRef<Path>,
    metadata: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let bytes = tensor_bytes(t)?;
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            dtype: dtype_name(t.dtype())?.to_string(),
            offset: payload.len() as u64,
            nbytes: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = serde_json::to_vec(&Header {
        schema_version: SCHEMA_VERSION,
        metadata,
        tensors: records,
    })?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write to a sibling file first so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let io = |e| Error::io(&tmp, e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&SCHEMA_VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&header).map_err(io)?;
    f.write_all(&payload).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {version}, this build reads {SCHEMA_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.schema_version != version {
        return Err(bad("header and preamble disagree on schema version"));
    }
    let payload = &bytes[header_end..];
    let mut tensors = BTreeMap::new();
    for rec in header.tensors {
        let start = rec.offset as usize;
        let end = start
            .checked_add(rec.nbytes as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", rec.name)))?;
        let raw = &payload[start..end];
        let n: usize = rec.shape.iter().product();
        let t = match rec.dtype.as_str() {
            "f32" if raw.len() == 4 * n => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, rec.shape.as_slice(), &Device::Cpu)?
            }
            "f64" if raw.len() == 8 * n => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, rec.shape.as_slice(), &Device::Cpu)?
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: dtype {other} with {} bytes for shape {:?}",
                    rec.name,
                    raw.len(),
                    rec.shape
                )))
            }
        };
        tensors.insert(rec.name, t);
    }
    Ok(Checkpoint {
        metadata: header.metadata,
        tensors,
    })
}
