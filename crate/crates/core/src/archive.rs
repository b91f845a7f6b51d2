//! Named-tensor container used for model weights and embedding caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes
//! version    u16
//! precision  u8   bytes per stored value, 4 or 8
//! meta_len   u32, then meta_len bytes of UTF-8 text
//! count      u32
//! count x { name_len u16, name, rank u8, rank x u32 dims, values }
//! crc32      u32 over every preceding byte
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{Real, Tensor};

pub const VERSION: u16 = 1;

/// Bytes per value written by this build.
pub const NATIVE_PRECISION: u8 = std::mem::size_of::<Real>() as u8;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: String,
    pub tensors: IndexMap<String, Tensor>,
}

pub fn encode(magic: &[u8; 4], archive: &Archive) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(NATIVE_PRECISION);
    out.extend_from_slice(&len32(archive.meta.len(), "metadata")?.to_le_bytes());
    out.extend_from_slice(archive.meta.as_bytes());
    out.extend_from_slice(&len32(archive.tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in &archive.tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("tensor {name} has too many dimensions")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&len32(d, "dimension")?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn len32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds 32 bits")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("truncated archive while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn text(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 4 + 2 + 1 + 4 + 4 + 4 {
        return Err(Error::Format(format!(
            "archive of {} bytes is truncated",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported archive version {version}, expected {VERSION}"
        )));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Format(
            "checksum mismatch: archive is corrupt or truncated".into(),
        ));
    }
    let precision = r.u8("precision")?;
    if precision != 4 && precision != 8 {
        return Err(Error::Format(format!(
            "unsupported value width {precision}"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.text(meta_len, "metadata")?;
    let count = r.u32("tensor count")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = r.text(name_len, "tensor name")?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(
            n.checked_mul(precision as usize)
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?,
            "tensor values",
        )?;
        let data: Vec<Real> = if precision == 8 {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()
        };
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Archive { meta, tensors })
}

pub fn save(path: &Path, magic: &[u8; 4], archive: &Archive) -> Result<()> {
    write_atomic(path, &encode(magic, archive)?)
}

pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}
