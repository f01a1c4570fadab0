//! Binary checkpoint format.
//!
//! ```text
//! b"SNNCKPT1"
//! u32 BE  entry count
//! per entry:
//!   u32 BE  name length, then UTF-8 name bytes
//!   u32 BE  rank, then rank × u32 BE extents
//!   numel × f32 LE values
//! ```
//!
//! Each spiking layer's `k` is a rank-0 entry named `spk<i>.k`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"SNNCKPT1";

pub fn encode(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((entries.len() as u32).to_be_bytes());
    for (name, t) in entries {
        out.extend((name.len() as u32).to_be_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_be_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_be_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::format("checkpoint", format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic, expected SNNCKPT1"));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("checkpoint", "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.saturating_mul(4), &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save<T: Real>(net: &Network<T>, path: &Path) -> Result<()> {
    let entries: Vec<_> = net.named_tensors().into_iter().map(|(n, t)| (n, t.cast::<f32>())).collect();
    std::fs::write(path, encode(&entries))?;
    Ok(())
}

/// Load a checkpoint into a network built from the same architecture.
pub fn load_into<T: Real>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let entries = decode(&bytes)?.into_iter().map(|(n, t)| (n, t.cast::<T>())).collect();
    net.load_named(entries)
}
