//! Weight files: `STWT`, u16 version, u32 tensor count, then per tensor a
//! u16-length UTF-8 name, u8 rank, u32 extents and little-endian f32 data.

use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STWT";
const VERSION: u16 = 1;

/// Serializes every tensor of `store` (parameters and buffers) in order.
pub fn encode_checkpoint(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("tensor name `{}` too long", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data(
                self.pos as u64,
                format!("truncated checkpoint: need {n} bytes for {what}, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::data(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::data(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::data(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank_at = r.pos as u64;
        let rank = r.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::data(rank_at, format!("`{name}` has rank {rank} > {MAX_RANK}")));
        }
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::data(rank_at, "tensor too large"))?, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::data(r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ParamKind;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5), ParamKind::Weight).unwrap();
        s.insert("a.running_var", Tensor::ones(&[3]), ParamKind::Buffer).unwrap();
        s
    }

    #[test]
    fn round_trip_and_layout() {
        let bytes = encode_checkpoint(&store()).unwrap();
        assert_eq!(&bytes[..4], b"STWT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        // header 10 + (2 + 8 + 1 + 8 + 24) + (2 + 13 + 1 + 4 + 12)
        assert_eq!(bytes.len(), 10 + 43 + 32);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back[0].0, "a.weight");
        assert_eq!(&back[0].1, store().get("a.weight").unwrap());
    }

    #[test]
    fn errors_carry_offsets() {
        let bytes = encode_checkpoint(&store()).unwrap();
        match decode_checkpoint(&bytes[..20]) {
            // header (10) + name length (2) + name (8): the rank byte is missing
            Err(Error::Data { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Data { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Data { .. })));
    }
}
