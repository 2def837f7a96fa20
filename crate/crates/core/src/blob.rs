//! Shared on-disk layout for checkpoints, perturbations and centroid caches.
//!
//! ```text
//! <magic>\n
//! <header as one line of JSON>\n
//! values <count>\n
//! <count little-endian f32 values>
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(magic: &str, header: &H, values: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_string(header)
        .map_err(|e| Error::Argument(format!("header not serializable: {e}")))?;
    let mut out = Vec::with_capacity(magic.len() + header.len() + 32 + values.len() * 4);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("values {}\n", values.len()).as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(
    path: &Path,
    magic: &str,
    bytes: &[u8],
) -> Result<(H, Vec<f32>)> {
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let mut pos = 0usize;
    let mut next_line = |what: &str| -> Result<(usize, &str)> {
        let start = pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| fail(start, format!("unterminated {what} line")))?;
        pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| fail(start, format!("{what} line is not UTF-8")))?;
        Ok((start, line))
    };

    let (at, line) = next_line("magic")?;
    if line != magic {
        return Err(fail(
            at,
            format!("expected magic {magic:?}, found {line:?}"),
        ));
    }
    let (at, line) = next_line("header")?;
    let header: H = serde_json::from_str(line).map_err(|e| fail(at, format!("bad header: {e}")))?;
    let (at, line) = next_line("value count")?;
    let count: usize = line
        .strip_prefix("values ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| fail(at, format!("expected `values <count>`, found {line:?}")))?;

    let body = &bytes[pos..];
    let need = count
        .checked_mul(4)
        .ok_or_else(|| fail(at, "value count overflows".into()))?;
    if body.len() != need {
        return Err(fail(
            pos + body.len().min(need),
            format!("expected {need} payload bytes, found {}", body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

pub fn write<H: Serialize>(path: &Path, magic: &str, header: &H, values: &[f32]) -> Result<()> {
    let bytes = encode(magic, header, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &str) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, magic, &bytes)
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}
