//! The `PADAPT01` tensor container shared by backbone and adapter checkpoints.
//!
//! Layout: the 8 magic bytes, a little-endian `u64` header length, a UTF-8
//! JSON header, then the raw little-endian `f32` payload. Tensor byte offsets
//! in the manifest are relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PADAPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    section: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded container.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub section: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Remove and return the tensor called `name`.
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }

    /// Take `name` and check its shape.
    pub fn take_shaped(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.take(name)?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Error out if any tensor was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.tensors.first() {
            Some((name, _)) => Err(Error::Format(format!("unexpected tensor {name}"))),
            None => Ok(()),
        }
    }
}

pub fn encode<C: Serialize>(section: &str, config: &C, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        section: section.into(),
        config: serde_json::to_value(config)?,
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {} (this build reads {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Format(err.to_string()))?;
        tensors.push((e.name, t));
    }
    Ok(Checkpoint {
        section: header.section,
        config: header.config,
        tensors,
    })
}

pub fn write<C: Serialize>(
    path: &Path,
    section: &str,
    config: &C,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let bytes = encode(section, config, tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a container and check its section tag.
pub fn read(path: &Path, section: &str) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode(&bytes)?;
    if ckpt.section != section {
        return Err(Error::Format(format!(
            "{} holds a {} section, expected {section}",
            path.display(),
            ckpt.section
        )));
    }
    Ok(ckpt)
}
