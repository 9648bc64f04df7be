//! Binary named-entry files for model and optimizer state.
//!
//! Layout (little endian): the 8-byte magic `PHCCKPT\0`, a `u32` format
//! version, a `u32` entry count, then per entry a `u8` kind (0 tensor,
//! 1 text), a `u32` name length and the UTF-8 name. Tensors continue with
//! a `u32` rank, one `u64` per extent, and the row-major `f64` payload;
//! text entries with a `u64` byte length and the UTF-8 bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PHCCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Text(String),
}

/// Ordered collection of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.put(name.into(), Entry::Tensor(t));
    }

    pub fn put_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.put(name.into(), Entry::Text(text.into()));
    }

    fn put(&mut self, name: String, entry: Entry) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Text(_)) => Err(Error::Checkpoint(format!("`{name}` is text, not a tensor"))),
            None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(Entry::Tensor(_)) => Err(Error::Checkpoint(format!("`{name}` is a tensor, not text"))),
            None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.tensor(name)?.item()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let kind: u8 = match entry {
                Entry::Tensor(_) => 0,
                Entry::Text(_) => 1,
            };
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        let truncated = |_| Error::Checkpoint("truncated file".into());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r).map_err(truncated)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = read_u32(&mut r).map_err(truncated)?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind).map_err(truncated)?;
            let name_len = read_u32(&mut r).map_err(truncated)? as usize;
            let name = utf8(take(&mut r, name_len)?)?;
            let entry = match kind[0] {
                0 => {
                    let rank = read_u32(&mut r).map_err(truncated)? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(read_u64(&mut r).map_err(truncated)? as usize);
                    }
                    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                    let bytes_needed = numel.and_then(|n| n.checked_mul(8)).filter(|&b| b <= r.len());
                    let payload = take(&mut r, bytes_needed.ok_or_else(|| Error::Checkpoint("truncated file".into()))?)?;
                    let data = payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    Entry::Tensor(Tensor::new(&shape, data)?)
                }
                1 => {
                    let len = read_u64(&mut r).map_err(truncated)? as usize;
                    Entry::Text(utf8(take(&mut r, len)?)?)
                }
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
            };
            ckpt.put(name, entry);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(ckpt)
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(&self.to_bytes())?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn utf8(b: &[u8]) -> Result<String> {
    String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("entry is not valid UTF-8".into()))
}
