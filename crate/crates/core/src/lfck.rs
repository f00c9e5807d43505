//! LFCK-v1 tensor container.
//!
//! ```text
//! 0..4    magic "LFCK"
//! 4..8    version, u32 LE (= 1)
//! 8..16   header length H, u64 LE
//! 16..16+H  UTF-8 JSON {"config": {...}, "tensors": [{"name","shape","offset","nbytes"}, ...]}
//! then    data section: f32 LE row-major, tensors contiguous in header order
//! ```
//!
//! Offsets are relative to the start of the data section. No padding.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;
/// Bytes before the JSON header.
pub const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container contents, tensors in file order.
#[derive(Debug, Clone)]
pub struct LfckFile {
    pub config: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl LfckFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Serialises to an in-memory byte buffer.
pub fn encode(config: &Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let nbytes = 4 * t.numel() as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors: entries,
    })?;
    let mut buf = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write(path: &Path, config: &Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let buf = encode(config, tensors)?;
    let mut f = fs::File::create(path).map_err(|e| with_path(e, path))?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<LfckFile> {
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    decode(&bytes)
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::io_msg(e.kind(), format!("{}: {e}", path.display()))
}

pub fn decode(bytes: &[u8]) -> Result<LfckFile> {
    if bytes.len() < PREAMBLE_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        return Err(truncated("preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = PREAMBLE_LEN
        .checked_add(hlen)
        .ok_or_else(|| Error::Format("header length overflow".into()))?;
    if bytes.len() < data_start {
        return Err(truncated("header"));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..data_start])
        .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    let data = &bytes[data_start..];

    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(Error::Format(format!("tensor {} has empty shape", e.name)));
        }
        if e.nbytes != 4 * numel as u64 {
            return Err(Error::Format(format!(
                "tensor {}: nbytes {} does not match shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        if e.offset != expected {
            return Err(Error::Format(format!(
                "tensor {}: offset {} breaks contiguous layout (expected {expected})",
                e.name, e.offset
            )));
        }
        expected += e.nbytes;
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if end > data.len() {
            return Err(truncated(&format!("data of tensor {}", e.name)));
        }
        let vals: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), vals)?));
    }
    if data.len() as u64 != expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after the data section",
            data.len() as u64 - expected
        )));
    }
    Ok(LfckFile {
        config: header.config,
        tensors,
    })
}

fn truncated(what: &str) -> Error {
    Error::io_msg(ErrorKind::UnexpectedEof, format!("truncated LFCK file: {what}"))
}
