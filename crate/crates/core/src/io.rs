//! Binary container shared by dataset and checkpoint files:
//! 4-byte magic, `u32` little-endian header length, UTF-8 JSON header, raw
//! little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CfaError, Result};

/// Provenance written into every output file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub seed: u64,
}

/// Shortest round-trip text for a float, switching to exponent notation for
/// very small or very large magnitudes so CSV cells stay short.
pub fn csv_float(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub(crate) fn encode_container(magic: &[u8; 4], header: &serde_json::Value, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let len = u32::try_from(header.len()).map_err(|_| CfaError::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

pub(crate) fn decode_container<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(serde_json::Value, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(CfaError::Format(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CfaError::Format("truncated header".into()))?;
    let header = serde_json::from_slice(&bytes[8..end])?;
    Ok((header, &bytes[end..]))
}

/// Writes via a temporary sibling and rename, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn push_i32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = i32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential reader over a little-endian payload.
pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CfaError::Format("payload shorter than header declares".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CfaError::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| CfaError::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CfaError::Format(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
