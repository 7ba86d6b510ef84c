//! Binary checkpoint format.
//!
//! ```text
//! "DMRICKP1" | u32 LE header length | JSON header | raw LE values | u32 LE CRC-32
//! ```
//!
//! The header holds the network config, the element type and the ordered
//! parameter names and shapes. The CRC covers every preceding byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetworkConfig};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DMRICKP1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    config: NetworkConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl<T: Element> ModelParams<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            tensors: self
                .iter()
                .map(|(n, t)| Entry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.num_scalars() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint written with the same element type.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(format_err("checkpoint CRC mismatch"));
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let json = body
            .get(12..12 + hlen)
            .ok_or_else(|| format_err("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| format_err(format!("checkpoint header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(format_err(format!(
                "checkpoint holds {} values, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut raw = &body[12 + hlen..];
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if raw.len() < n * T::BYTES {
                return Err(format_err(format!(
                    "checkpoint truncated inside {}",
                    e.name
                )));
            }
            let (chunk, rest) = raw.split_at(n * T::BYTES);
            raw = rest;
            let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push(Tensor::new(&e.shape, data)?);
            names.push(e.name);
        }
        if !raw.is_empty() {
            return Err(format_err(format!(
                "{} trailing bytes after checkpoint values",
                raw.len()
            )));
        }
        ModelParams::from_parts(header.config, names, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
