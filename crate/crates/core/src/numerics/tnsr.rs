//! `TNSR1` binary tensor files and manifest directories of them.
//!
//! Layout: `b"TNSR"`, version byte (1), dtype byte (0 = f32, 1 = f64), rank
//! byte, a zero reserved byte, `rank` little-endian `u32` extents, then the
//! row-major little-endian payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes, read_json, write_json};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Float64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::Float32),
            1 => Ok(DType::Float64),
            other => Err(bad(format!("unknown dtype code {other}"))),
        }
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "TNSR1",
        detail: detail.into(),
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| bad("rank exceeds 255"))?;
    let width = if dtype == DType::Float32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), rank, 0]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| bad(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::Float32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::Float64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing TNSR magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])?;
    let rank = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(bad("reserved byte is not zero"));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    let data: Vec<f64> = match dtype {
        DType::Float32 if payload.len() == 4 * n => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::Float64 if payload.len() == 8 * n => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        _ => {
            return Err(bad(format!(
                "payload of {} bytes for shape {shape:?}",
                payload.len()
            )))
        }
    };
    Ok((Tensor::new(&shape, data)?, dtype))
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    atomic_write(path, &encode(t, dtype)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&read_bytes(path)?).map(|(t, _)| t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes each tensor to `<dir>/<name>.tnsr` plus a `manifest.json` index.
pub fn write_manifest_dir(
    dir: &Path,
    tensors: &BTreeMap<String, Tensor>,
    dtype: DType,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(bad(format!("unusable tensor name {name:?}")));
        }
        let file = format!("{name}.tnsr");
        write(&dir.join(&file), t, dtype)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
            dtype,
        });
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            format: "TNSR1".into(),
            tensors: entries,
        },
    )
}

pub fn read_manifest_dir(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    manifest
        .tensors
        .into_iter()
        .map(|e| {
            let t = read(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(bad(format!(
                    "{}: manifest shape {:?}, file shape {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            Ok((e.name, t))
        })
        .collect()
}
