//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HPCK"
//! version u32 = 1
//! count   u64
//! count × { name_len u32, name (UTF-8), rank u32, dims u64 × rank, payload f64 × Π dims }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"HPCK";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dim overflow".into()))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint("element count overflow".into()))?;
            shape.push(d);
        }
        if numel > r.remaining() / 8 {
            return Err(Error::Checkpoint(format!("{name}: payload truncated")));
        }
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Soft-prompt matrix: `m` u64, `d` u64, then `m·d` f64 values, all little-endian.
pub fn encode_matrix(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.numel());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let rows = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("rows overflow".into()))?;
    let cols = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("cols overflow".into()))?;
    let numel = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Checkpoint("element count overflow".into()))?;
    if numel.checked_mul(8) != Some(r.remaining()) {
        return Err(Error::Checkpoint(format!(
            "{rows}x{cols} matrix needs {} payload bytes, found {}",
            numel.saturating_mul(8),
            r.remaining()
        )));
    }
    let data = r
        .take(numel * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::matrix(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut store = ParamStore::new();
        store
            .insert("a.w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]))
            .unwrap();
        store
            .insert("b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let back = decode(&encode(&store)).unwrap();
        assert_eq!(back.len(), 2);
        for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        let bytes = encode(&store);
        assert_eq!(&bytes[..4], b"HPCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..21], b"x");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 1 + 4 + 16 + 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(decode(b"").is_err());
        assert!(decode(b"XXXX\x01\0\0\0").is_err());
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(2, 2)).unwrap();
        let bytes = encode(&store);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        // Huge declared dims must not allocate.
        let mut huge = Vec::new();
        huge.extend_from_slice(b"HPCK");
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&1u64.to_le_bytes());
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.push(b'x');
        huge.extend_from_slice(&2u32.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        let bytes = encode_matrix(&t);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(decode_matrix(&bytes).unwrap(), t);
        assert!(decode_matrix(&bytes[..20]).is_err());
    }
}
