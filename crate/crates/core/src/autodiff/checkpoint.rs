//! Flat binary checkpoint of named arrays.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! magic "RILICKP1"
//! entry_count
//! per entry: name_len, name (UTF-8), rank, dims[rank]
//! values: f32 little-endian, entries concatenated in table order
//! ```

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RILICKP1";

pub fn encode<'a, T: Real + 'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &entries {
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let count = r.u32()?;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name =
            std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("checkpoint name is not UTF-8"))?.to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint values"));
    }
    Ok(out)
}

pub fn save<'a, T: Real + 'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_bytes() {
        let t = Tensor::<f32>::new(vec![1], vec![1.0]).unwrap();
        let bytes = encode([("w", &t)]);
        let mut expect = b"RILICKP1".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0, b'w', 1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncated_is_format_error() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode([("a", &t)]);
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn roundtrip_names_and_values() {
        let a = Tensor::<f64>::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::<f64>::new(vec![4], vec![0.5, -1.0, 2.0, 1e-3]).unwrap();
        let decoded = decode(&encode([("blocks.0.attn.q.weight", &a), ("head.bias", &b)])).unwrap();
        assert_eq!(decoded[0].0, "blocks.0.attn.q.weight");
        assert_eq!(decoded[0].1.shape(), &[2, 3]);
        assert_eq!(decoded[1].1.data(), &[0.5, -1.0, 2.0, 1e-3f32]);
    }
}
