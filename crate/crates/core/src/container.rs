//! Versioned binary container for checkpoints, model snapshots and corpora.
//!
//! Layout, all integers little-endian:
//! `"PVCX1"`, u32 version, u64 metadata length, metadata JSON, u64 array
//! count, then per array: u64 name length, name, u8 dtype, u64 rank, u64
//! dims, u64 payload offset, u64 byte length. After the table comes u64
//! payload length, the payload, and a CRC-32 over every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 5] = b"PVCX1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    arrays: Vec<(String, ArrayEntry)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set_meta("kind", kind);
        c
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata value {key}={raw}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.meta("kind")?;
        if found != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} file, found {found}")));
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    fn insert(&mut self, name: &str, entry: ArrayEntry) -> Result<()> {
        if self.arrays.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
        self.arrays.push((name.to_string(), entry));
        Ok(())
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        self.insert(
            name,
            ArrayEntry {
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                bytes,
            },
        )
    }

    pub fn put_u64(&mut self, name: &str, values: &[u64]) -> Result<()> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.insert(
            name,
            ArrayEntry {
                dtype: DType::U64,
                shape: vec![values.len()],
                bytes,
            },
        )
    }

    pub fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    /// Reads a float array, converting between `f32` and `f64` if needed.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => e
                .bytes
                .chunks_exact(4)
                .map(|b| T::lit(f32::read_le(b) as f64))
                .collect(),
            DType::F64 => e.bytes.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
            DType::U64 => {
                return Err(Error::Checkpoint(format!("array {name} is integer, expected float")))
            }
        };
        Tensor::new(e.shape.clone(), data).map_err(|_| Error::Checkpoint(format!("array {name} has inconsistent shape")))
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let e = self.entry(name)?;
        if e.dtype != DType::U64 {
            return Err(Error::Checkpoint(format!("array {name} is not u64")));
        }
        Ok(e.bytes
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    /// Stores every parameter as `prefix.name`.
    pub fn put_params<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) -> Result<()> {
        for p in store.iter() {
            self.put_tensor(&format!("{prefix}.{}", p.name), &p.value)?;
        }
        Ok(())
    }

    /// Overwrites the values of `store` from `prefix.name` arrays. Shapes must match.
    pub fn load_params<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.tensor::<T>(&format!("{prefix}.{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, file has {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("string map serializes");
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(&meta);
        put_u64(&mut out, self.arrays.len() as u64);
        let mut offset = 0u64;
        for (name, e) in &self.arrays {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype.code());
            put_u64(&mut out, e.shape.len() as u64);
            e.shape.iter().for_each(|&d| put_u64(&mut out, d as u64));
            put_u64(&mut out, offset);
            put_u64(&mut out, e.bytes.len() as u64);
            offset += e.bytes.len() as u64;
        }
        put_u64(&mut out, offset);
        for (_, e) in &self.arrays {
            out.extend_from_slice(&e.bytes);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a PVCX1 container".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
        }
        let meta_len = r.u64()? as usize;
        let metadata: BTreeMap<String, String> = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?;
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::Checkpoint(format!("array {name}: unknown dtype")))?;
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            let elems: usize = shape.iter().product();
            if elems * dtype.size() != len {
                return Err(Error::Checkpoint(format!("array {name}: size does not match shape")));
            }
            table.push((name, dtype, shape, offset, len));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let mut c = Container {
            metadata,
            arrays: Vec::new(),
        };
        for (name, dtype, shape, offset, len) in table {
            let bytes = payload
                .get(offset..offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("array {name} out of bounds")))?
                .to_vec();
            c.insert(&name, ArrayEntry { dtype, shape, bytes })?;
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
