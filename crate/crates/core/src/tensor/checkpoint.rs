//! Weight checkpoints.
//!
//! Layout: the magic bytes `RPLK1`, then one record per parameter until end of file:
//!
//! ```text
//! u32 LE   name length in bytes
//! [u8]     UTF-8 name
//! u32 LE   rank
//! u64 LE   dims (rank of them)
//! f64 LE   values, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"RPLK1";

pub fn write_checkpoint(store: &ParamStore, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for p in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.add(name, value)?;
    }
    Ok(store)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).map_err(|e| Error::io(path, e))?;
    crate::data::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store
            .add("conv.w", Tensor::uniform(vec![2, 1, 3, 3], 1.0, &mut rng))
            .unwrap();
        store
            .add(
                "odd",
                Tensor::new(vec![3], vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
            )
            .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"RPLK1");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in store.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bitwise_eq(&b.value));
        }
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_and_bad_magic_are_rejected() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        let short = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &short[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    }
}
