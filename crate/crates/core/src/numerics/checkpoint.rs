//! Versioned little-endian tensor container.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes  b"CCRTNSR\0"
//! version      u32
//! header_len   u64      followed by header_len bytes of UTF-8 (JSON, may be empty)
//! count        u64
//! per tensor:  name_len u64, name bytes, ndim u64, dims u64 × ndim, data f64 × prod(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"CCRTNSR\0";
pub const VERSION: u32 = 1;

/// Upper bound on any single length field, to reject corrupt files early.
const MAX_LEN: u64 = 1 << 32;

pub fn encode(header: &str, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn len(&mut self) -> Option<usize> {
        self.u64().filter(|&v| v <= MAX_LEN).map(|v| v as usize)
    }
}

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn decode(bytes: &[u8]) -> std::result::Result<(String, NamedTensors), String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = r
        .take(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or("truncated version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let hlen = r.len().ok_or("truncated header length")?;
    let header = r.take(hlen).ok_or("truncated header")?;
    let header = String::from_utf8(header.to_vec()).map_err(|_| "header is not UTF-8")?;
    let count = r.len().ok_or("truncated tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let nlen = r.len().ok_or_else(|| format!("tensor {i}: truncated name length"))?;
        let name = r.take(nlen).ok_or_else(|| format!("tensor {i}: truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| format!("tensor {i}: name is not UTF-8"))?;
        let ndim = r.len().ok_or_else(|| format!("{name}: truncated ndim"))?;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.len().ok_or_else(|| format!("{name}: truncated dims"))?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n as u64 <= MAX_LEN)
            .ok_or_else(|| format!("{name}: implausible shape {dims:?}"))?;
        let raw = r
            .take(numel * 8)
            .ok_or_else(|| format!("{name}: truncated data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| e.to_string())?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok((header, tensors))
}

pub fn save(path: &Path, header: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&encode(header, tensors)).at(path)
}

pub fn load(path: &Path) -> Result<(String, NamedTensors)> {
    let mut bytes = Vec::new();
    fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::from_vec(&[2], vec![1.0, -0.5]).unwrap();
        let bytes = encode("{}", &[("w", &t)]);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[20..22], b"{}");
        assert_eq!(&bytes[22..30], &1u64.to_le_bytes());
        assert_eq!(&bytes[30..38], &1u64.to_le_bytes());
        assert_eq!(&bytes[38..39], b"w");
        assert_eq!(&bytes[39..47], &1u64.to_le_bytes());
        assert_eq!(&bytes[47..55], &2u64.to_le_bytes());
        assert_eq!(&bytes[55..63], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 71);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[3, 2]);
        let mut bytes = encode("", &[("a", &t)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
        bytes[0] = b'X';
        assert_eq!(decode(&bytes).unwrap_err(), "bad magic");
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>(), header in ".{0,20}") {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin()).collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let bytes = encode(&header, &[("x", &t), ("y", &t)]);
            let (h, ts) = decode(&bytes).unwrap();
            prop_assert_eq!(h, header);
            prop_assert_eq!(ts.len(), 2);
            prop_assert_eq!(&ts[1].1, &t);
        }
    }
}
