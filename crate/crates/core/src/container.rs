//! Shared binary container for checkpoints and patch archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   b"EXSG" (checkpoint) or b"EXPS" (patch archive)
//! version      u32
//! manifest_len u64
//! manifest     JSON, manifest_len bytes
//! payload_len  u64
//! payload      payload_len bytes
//! crc32        u32       CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const HEADER: usize = 4 + 4 + 8;

pub fn encode<M: Serialize>(magic: &[u8; 4], version: u32, manifest: &M, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Corrupt(format!("manifest encode: {e}")))?;
    let mut out = Vec::with_capacity(HEADER + json.len() + 8 + payload.len() + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> Option<u64> {
    bytes.get(at..at + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8], magic: &[u8; 4], version: u32) -> Result<(M, Vec<u8>)> {
    if bytes.len() < HEADER + 8 + 4 {
        return Err(Error::Corrupt(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    // checksum before any length field is trusted
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::VersionMismatch {
            found,
            supported: version,
        });
    }
    let truncated = || Error::Corrupt(format!("truncated: {} bytes", bytes.len()));
    let manifest_len = usize::try_from(read_u64(bytes, 8).ok_or_else(truncated)?).map_err(|_| truncated())?;
    let manifest_end = HEADER.checked_add(manifest_len).ok_or_else(truncated)?;
    let payload_len =
        usize::try_from(read_u64(bytes, manifest_end).ok_or_else(truncated)?).map_err(|_| truncated())?;
    let payload_start = manifest_end + 8;
    let payload_end = payload_start.checked_add(payload_len).ok_or_else(truncated)?;
    if bytes.len() != payload_end + 4 {
        return Err(if bytes.len() < payload_end + 4 {
            truncated()
        } else {
            Error::Corrupt(format!("{} trailing bytes", bytes.len() - payload_end - 4))
        });
    }
    let manifest = serde_json::from_slice(&bytes[HEADER..manifest_end])
        .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    Ok((manifest, bytes[payload_start..payload_end].to_vec()))
}

pub fn write_file<M: Serialize>(path: &Path, magic: &[u8; 4], version: u32, manifest: &M, payload: &[u8]) -> Result<()> {
    let bytes = encode(magic, version, manifest, payload)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file<M: DeserializeOwned>(path: &Path, magic: &[u8; 4], version: u32) -> Result<(M, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic, version).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Location of one tensor inside a payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

const REAL_BYTES: usize = std::mem::size_of::<Real>();

/// Appends tensors to a payload as raw little-endian [`Real`] values.
#[derive(Debug, Default)]
pub struct TensorWriter {
    pub entries: Vec<TensorEntry>,
    pub payload: Vec<u8>,
}

impl TensorWriter {
    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.push_raw(name, tensor.shape(), tensor.as_slice());
    }

    pub fn push_raw(&mut self, name: impl Into<String>, shape: &[usize], values: &[Real]) {
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.payload.len(),
        });
        self.payload.reserve(values.len() * REAL_BYTES);
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn read_tensor(payload: &[u8], entry: &TensorEntry) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    let bytes = entry
        .offset
        .checked_add(n * REAL_BYTES)
        .and_then(|end| payload.get(entry.offset..end))
        .ok_or_else(|| Error::Corrupt(format!("tensor {} extends past payload", entry.name)))?;
    let data = bytes
        .chunks_exact(REAL_BYTES)
        .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Corrupt(format!("tensor {}: {e}", entry.name)))
}
