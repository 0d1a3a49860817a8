//! Self-describing tensor container: an 8-byte magic, a little-endian u32
//! header length, a JSON header, then raw little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode<M: Serialize>(magic: &[u8; 8], meta: &M, tensors: &[(&str, Vec<usize>, &[f32])]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
    }
    let header = serde_json::to_vec(&Header { meta, tensors: entries })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * offset);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, data) in tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<M: for<'de> Deserialize<'de>>(
    magic: &[u8; 8],
    bytes: &[u8],
    origin: &Path,
) -> Result<(M, Vec<NamedTensor>)> {
    let bad = |why: &str| Error::format(origin, why.to_string());
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(bad("bad magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> =
        serde_json::from_slice(header_bytes).map_err(|e| Error::format(origin, format!("header: {e}")))?;
    let payload = &bytes[12 + header_len..];
    if !payload.len().is_multiple_of(4) {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let floats = payload.len() / 4;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        if entry.offset + len > floats {
            return Err(bad("tensor extends past the payload"));
        }
        let data = payload[4 * entry.offset..4 * (entry.offset + len)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    Ok((header.meta, tensors))
}

/// Removes the tensor called `name` and checks its shape.
pub fn take(tensors: &mut Vec<NamedTensor>, name: &str, shape: &[usize], origin: &Path) -> Result<Vec<f32>> {
    let pos = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::format(origin, format!("missing tensor `{name}`")))?;
    let t = tensors.swap_remove(pos);
    if t.shape != shape {
        return Err(Error::format(
            origin,
            format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape),
        ));
    }
    Ok(t.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = [1.0f32, -2.5, f32::MIN_POSITIVE];
        let b = [7.0f32; 4];
        let bytes = encode(b"TESTMAGC", &"meta", &[("a", vec![3], &a), ("b", vec![2, 2], &b)]).unwrap();
        let (meta, mut t): (String, _) = decode(b"TESTMAGC", &bytes, Path::new("x")).unwrap();
        assert_eq!(meta, "meta");
        assert_eq!(take(&mut t, "b", &[2, 2], Path::new("x")).unwrap(), b.to_vec());
        assert_eq!(take(&mut t, "a", &[3], Path::new("x")).unwrap(), a.to_vec());
        assert!(decode::<String>(b"OTHERMAG", &bytes, Path::new("x")).is_err());
        assert!(decode::<String>(b"TESTMAGC", &bytes[..bytes.len() - 2], Path::new("x")).is_err());
    }
}
