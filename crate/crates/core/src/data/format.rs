//! `DMRI v1` dataset files.
//!
//! ```text
//! "DMRIDSv1" | u32 nx | u32 ny | u32 nt | u32 count | records | u32 CRC-32
//! ```
//!
//! All integers are little-endian. Each record is `nx * ny * nt` complex
//! samples stored as interleaved `f32` (re, im), x fastest, then y, then t.
//! The CRC covers the record payload.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::invalid;
use crate::kspace::ComplexImageSequence;
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"DMRIDSv1";

pub fn encode_dataset(records: &[ComplexImageSequence]) -> Result<Vec<u8>> {
    let first = records
        .first()
        .ok_or_else(|| invalid!("a dataset needs at least one record"))?;
    let (nx, ny, nt) = first.geometry();
    let mut out = Vec::with_capacity(28 + records.len() * first.len() * 8);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [nx, ny, nt, records.len()] {
        let v =
            u32::try_from(v).map_err(|_| invalid!("dataset dimension {v} does not fit in u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let payload_start = out.len();
    for r in records {
        if !r.same_geometry(first) {
            return Err(invalid!(
                "dataset records differ in geometry: {:?} vs {:?}",
                r.geometry(),
                first.geometry()
            ));
        }
        for c in r.data() {
            out.extend_from_slice(&(c.re as f32).to_le_bytes());
            out.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<ComplexImageSequence>> {
    if bytes.len() < 28 || &bytes[..8] != DATASET_MAGIC {
        return Err(format_err("not a DMRI v1 dataset (bad magic)"));
    }
    let field = |i: usize| {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (nx, ny, nt, count) = (field(0), field(1), field(2), field(3));
    let per = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nt))
        .ok_or_else(|| format_err("dataset dimensions overflow"))?;
    let expected = per
        .checked_mul(count)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| format_err("dataset size overflow"))?;
    let payload = &bytes[24..bytes.len() - 4];
    if payload.len() != expected {
        return Err(format_err(format!(
            "dataset payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(format_err("dataset CRC mismatch"));
    }
    if per == 0 {
        return Err(format_err("dataset has a zero extent"));
    }
    payload
        .chunks_exact(per * 8)
        .map(|rec| {
            let data = rec
                .chunks_exact(8)
                .map(|c| {
                    let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
                    let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
                    Complex64::new(re as f64, im as f64)
                })
                .collect();
            ComplexImageSequence::new(nx, ny, nt, data)
                .map_err(|e| format_err(format!("dataset record: {e}")))
        })
        .collect()
}

pub fn write_dataset(path: &Path, records: &[ComplexImageSequence]) -> Result<()> {
    let bytes = encode_dataset(records)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ComplexImageSequence>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

/// CRC-32 of the record payload of an encoded dataset, as stored in its trailer.
pub fn payload_crc(bytes: &[u8]) -> Option<u32> {
    (bytes.len() >= 28)
        .then(|| u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes")))
}
