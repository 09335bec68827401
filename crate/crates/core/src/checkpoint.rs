//! VPCK tensor container: `"VPCK"`, u32 version, u32 entry count, then per
//! entry u16 name length, UTF-8 name, u8 rank, rank × u64 dims, u8 dtype tag
//! and the raw payload. Integers and payloads are little-endian.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VPCK";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: &'static str,
    pub bytes: usize,
}

pub fn encode<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::Checkpoint(format!("name `{name}` is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in t.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated at offset {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn walk<F>(bytes: &[u8], mut visit: F) -> Result<()>
where
    F: FnMut(String, Vec<usize>, &[u8]) -> Result<()>,
{
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic at offset 0, expected VPCK".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} at offset 4"
        )));
    }
    let count = r.u32("entry count")?;
    for i in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i} at offset {at}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "entry `{name}`: unknown dtype {dtype} at offset {dtype_at}"
            )));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: shape overflows")))?;
        let payload = r.take(n, "payload")?;
        visit(name, shape, payload)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    walk(bytes, |name, shape, payload| {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
        out.push((name, t));
        Ok(())
    })?;
    Ok(out)
}

pub fn inspect(bytes: &[u8]) -> Result<Vec<EntryInfo>> {
    let mut out = Vec::new();
    walk(bytes, |name, shape, payload| {
        out.push(EntryInfo {
            name,
            shape,
            dtype: "f32",
            bytes: payload.len(),
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(entries.iter().map(|(n, t)| (n.as_str(), t)))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&std::fs::read(path)?)
}
