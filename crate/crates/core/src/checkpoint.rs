//! Versioned binary container: magic `SGCK`, `u32` version, a JSON metadata
//! string, then length-prefixed named entries (f32 tensors or raw bytes),
//! closed by a CRC32 of everything before it. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_BYTES: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: String,
    pub entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.push((name.into(), Entry::Tensor(t.clone())));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.entries.push((name.into(), Entry::Bytes(b)));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, Entry::Tensor(t))) => Ok(t),
            Some(_) => Err(Error::Checkpoint(format!("entry {name:?} is not a tensor"))),
            None => Err(Error::Checkpoint(format!("missing entry {name:?}"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, Entry::Bytes(b))) => Ok(b),
            Some(_) => Err(Error::Checkpoint(format!("entry {name:?} is not a byte blob"))),
            None => Err(Error::Checkpoint(format!("missing entry {name:?}"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_blob(&mut out, self.meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            put_blob(&mut out, name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(KIND_TENSOR);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(KIND_BYTES);
                    put_blob(&mut out, b);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta = String::from_utf8(r.blob()?.to_vec()).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(r.blob()?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let entry = match r.take(1)?[0] {
                KIND_TENSOR => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let len: usize = shape.iter().product();
                    let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                        .collect();
                    Entry::Tensor(Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?)
                }
                KIND_BYTES => Entry::Bytes(r.blob()?.to_vec()),
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k} for {name:?}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
        }
        Ok(Self { meta, entries })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("sgck.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
