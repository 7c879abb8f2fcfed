//! Binary parameter container.
//!
//! Layout: `HCTN`, u32 version, u32 count, then per entry u32 name length,
//! UTF-8 name, u32 rank, u64 per dim; after the table, every tensor's data as
//! little-endian f64 in table order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCTN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let fail = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(fail("bad magic"));
    }
    let version = r.u32().ok_or_else(|| fail("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = r.u32().ok_or_else(|| fail("truncated header"))?;
    let mut table = Vec::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| fail("truncated table"))? as usize;
        let name = r.take(len).ok_or_else(|| fail("truncated table"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| fail("name is not UTF-8"))?;
        let rank = r.u32().ok_or_else(|| fail("truncated table"))? as usize;
        if rank > 3 {
            return Err(fail(&format!("{name}: rank {rank} exceeds 3")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(|| fail("truncated table"))? as usize);
        }
        table.push((name, shape));
    }
    let mut out = BTreeMap::new();
    for (name, shape) in table {
        let len: usize = shape.iter().product();
        let raw = r
            .take(len.checked_mul(8).ok_or_else(|| fail("size overflow"))?)
            .ok_or_else(|| fail(&format!("{name}: truncated data")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok(out)
}
