//! The MTDB v1 tensor-bundle container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTDB" | version: u32 = 1 | entry count: u32
//! per entry:  name len: u32 | name (UTF-8) | dtype: u8 | rank: u32 | dims: u64 * rank | payload len: u64
//! payloads, concatenated in header order
//! ```
//!
//! Payloads are row-major and little-endian. A rank-0 entry holds one scalar.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTDB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn check(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Invalid("bundle entry names must be non-empty".into()));
        }
        let expected = (self.numel() * self.dtype.width()) as u64;
        if expected != self.payload.len() as u64 {
            return Err(Error::LengthMismatch {
                entry: self.name.clone(),
                expected,
                actual: self.payload.len() as u64,
            });
        }
        Ok(())
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorBundle {
    entries: Vec<Entry>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        entry.check()?;
        if self.contains(&entry.name) {
            return Err(Error::Invalid(format!("duplicate bundle entry `{}`", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(Entry { name: name.into(), dtype: DType::F32, shape: shape.to_vec(), payload })
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(Entry { name: name.into(), dtype: DType::F64, shape: shape.to_vec(), payload })
    }

    pub fn push_i64(&mut self, name: &str, shape: &[usize], data: &[i64]) -> Result<()> {
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(Entry { name: name.into(), dtype: DType::I64, shape: shape.to_vec(), payload })
    }

    fn require(&self, name: &str, dtype: DType) -> Result<&Entry> {
        let entry = self.get(name).ok_or_else(|| Error::MissingEntry(name.into()))?;
        if entry.dtype != dtype {
            return Err(Error::Format(format!("entry `{name}` has dtype {:?}, expected {dtype:?}", entry.dtype)));
        }
        Ok(entry)
    }

    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let e = self.require(name, DType::F32)?;
        let data = e.payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let e = self.require(name, DType::F64)?;
        let data = e.payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn i64(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        let e = self.require(name, DType::I64)?;
        let data = e.payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let file = File::create(path.as_ref()).map_err(|source| Error::Io { offset: 0, source })?;
        let mut sink = BufWriter::new(file);
        let n = write_bundle(self, &mut sink)?;
        sink.flush().map_err(|source| Error::Io { offset: n, source })?;
        Ok(n)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref()).map_err(|source| Error::Io { offset: 0, source })?;
        read_bundle(BufReader::new(file))
    }
}

struct Counting<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Counting<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io { offset: self.written, source })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Serializes `bundle` and returns the number of bytes written.
pub fn write_bundle<W: Write>(bundle: &TensorBundle, sink: W) -> Result<u64> {
    let mut names = HashSet::new();
    for e in &bundle.entries {
        e.check()?;
        if !names.insert(e.name.as_str()) {
            return Err(Error::Invalid(format!("duplicate bundle entry `{}`", e.name)));
        }
    }

    let mut out = Counting { inner: sink, written: 0 };
    out.put(MAGIC)?;
    out.put(&VERSION.to_le_bytes())?;
    out.put(&(bundle.entries.len() as u32).to_le_bytes())?;
    for e in &bundle.entries {
        out.put(&(e.name.len() as u32).to_le_bytes())?;
        out.put(e.name.as_bytes())?;
        out.put(&[e.dtype.tag()])?;
        out.put(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            out.put(&(d as u64).to_le_bytes())?;
        }
        out.put(&(e.payload.len() as u64).to_le_bytes())?;
    }
    for e in &bundle.entries {
        out.put(&e.payload)?;
    }
    Ok(out.written)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated header while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a complete MTDB stream. Trailing bytes after the last payload are rejected.
pub fn read_bundle<R: Read>(mut source: R) -> Result<TensorBundle> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf).map_err(|e| Error::Io { offset: buf.len() as u64, source: e })?;

    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")? as usize;

    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format("entry name is not valid UTF-8".into()))?
            .to_string();
        let tag = cur.take(1, "dtype")?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| Error::Format(format!("entry `{name}` has unknown dtype tag {tag}")))?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let len = cur.u64("payload length")?;
        let expected = shape
            .iter()
            .try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::Format(format!("entry `{name}` shape overflows")))?;
        if expected != len {
            return Err(Error::LengthMismatch { entry: name, expected, actual: len });
        }
        headers.push((name, dtype, shape, len as usize));
    }

    let mut bundle = TensorBundle::new();
    for (name, dtype, shape, len) in headers {
        let available = buf.len() - cur.pos;
        if available < len {
            return Err(Error::LengthMismatch { entry: name, expected: len as u64, actual: available as u64 });
        }
        let payload = buf[cur.pos..cur.pos + len].to_vec();
        cur.pos += len;
        bundle.push(Entry { name, dtype, shape, payload })?;
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last payload", buf.len() - cur.pos)));
    }
    Ok(bundle)
}
