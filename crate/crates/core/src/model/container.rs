//! `PCWT1` tensor container.
//!
//! Layout: the 6 magic bytes `PCWT1\0`, a little-endian `u64` header length,
//! a UTF-8 JSON header mapping tensor name to
//! `{"dtype": "f32", "shape": [...], "offset": o, "byte_length": n}`, then the
//! little-endian f32 payload. Offsets are relative to the payload start.
//! Writers emit header keys in lexicographic order and lay the payload out in
//! the same order, so identical tensors always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"PCWT1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_length: u64,
}

/// Named f32 tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn header(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let byte_length = (t.data.len() * 4) as u64;
            header.insert(
                name.clone(),
                HeaderEntry {
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                    byte_length,
                },
            );
            offset += byte_length;
        }
        Ok(serde_json::to_vec(&header)?)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::Container(format!("write failed: {e}"));
        let header = self.header()?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for t in self.tensors.values() {
            for v in &t.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
    }

    pub fn read_from(mut r: impl Read + Seek) -> Result<Self> {
        let bad = |msg: String| Error::Container(msg);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|e| bad(format!("truncated magic: {e}")))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|e| bad(format!("truncated header length: {e}")))?;
        let header_len = u64::from_le_bytes(len);
        let mut header = vec![0u8; usize::try_from(header_len).map_err(|_| bad("header too large".into()))?];
        r.read_exact(&mut header)
            .map_err(|e| bad(format!("truncated header: {e}")))?;
        let header: BTreeMap<String, HeaderEntry> =
            serde_json::from_slice(&header).map_err(|e| bad(format!("header is not valid JSON: {e}")))?;
        let payload_start = 14 + header_len;

        let mut entries: Vec<_> = header.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut tensors = BTreeMap::new();
        let mut buf = Vec::new();
        for (name, entry) in entries {
            let load_err = |reason: String| Error::Load {
                tensor: name.clone(),
                reason,
            };
            if entry.dtype != "f32" {
                return Err(load_err(format!("unsupported dtype {}", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            if entry.byte_length != (n * 4) as u64 {
                return Err(load_err(format!(
                    "byte_length {} does not match shape {:?}",
                    entry.byte_length, entry.shape
                )));
            }
            r.seek(SeekFrom::Start(payload_start + entry.offset))
                .map_err(|e| load_err(format!("seek failed: {e}")))?;
            buf.resize(n * 4, 0);
            r.read_exact(&mut buf)
                .map_err(|e| load_err(format!("payload truncated: {e}")))?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(
                name,
                Tensor {
                    shape: entry.shape,
                    data,
                },
            );
        }
        Ok(Self { tensors })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(std::io::Cursor::new(bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
