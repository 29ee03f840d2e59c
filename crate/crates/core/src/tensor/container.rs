//! Named-tensor container file.
//!
//! Layout: an 8-byte little-endian header length `L`, then `L` bytes of
//! UTF-8 JSON mapping each name to `{"shape", "dtype": "f32", "byte_offset"}`,
//! then the little-endian `f32` payload. Offsets are relative to the start
//! of the payload. Values are stored as `f32` and widened back to `f64`
//! on read.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

pub fn encode_container(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        header.insert(
            name.clone(),
            Entry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: offset,
            },
        );
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<NamedTensors> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 8 {
        return Err(bad("file shorter than the 8-byte header prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    let header: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[8..payload_start])?;
    let payload = &bytes[payload_start..];
    let mut out = NamedTensors::new();
    for (name, e) in header {
        if e.dtype != "f32" {
            return Err(bad(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(bad(format!(
                "{name}: payload range {start}..{end} out of bounds"
            )));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.insert(name, Tensor::new(&e.shape, data)?);
    }
    Ok(out)
}

pub fn write_container(path: impl AsRef<Path>, tensors: &NamedTensors) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut m = NamedTensors::new();
        m.insert("a".into(), Tensor::new(&[2], vec![1.0, -2.5]).unwrap());
        m.insert("b".into(), Tensor::new(&[1, 1], vec![0.5]).unwrap());
        let bytes = encode_container(&m).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["a"]["byte_offset"], 0);
        assert_eq!(header["b"]["byte_offset"], 8);
        assert_eq!(header["b"]["dtype"], "f32");
        assert_eq!(bytes.len(), 8 + hlen + 12);
        assert_eq!(&bytes[8 + hlen..8 + hlen + 4], &1.0f32.to_le_bytes());
        assert_eq!(decode_container(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut m = NamedTensors::new();
        m.insert("w".into(), Tensor::ones(&[4]));
        let mut bytes = encode_container(&m).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
