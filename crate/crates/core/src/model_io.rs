//! Versioned little-endian container for network weights.
//!
//! Layout: `"EPNN"`, format version (u32), model kind (u32), entry count (u32),
//! then per entry: name length (u32), UTF-8 name, dtype tag (u8), rank (u32),
//! extents (u32 each), raw f32 values. A CRC-32 of every preceding byte closes
//! the file.

use std::path::Path;

use eyepurify_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"EPNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    ShapePreserving,
    TableFaithful,
    LossNet,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::ShapePreserving => 0,
            ModelKind::TableFaithful => 1,
            ModelKind::LossNet => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::ShapePreserving),
            1 => Some(ModelKind::TableFaithful),
            2 => Some(ModelKind::LossNet),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ShapePreserving => "shape-preserving transform network",
            ModelKind::TableFaithful => "table-faithful transform network",
            ModelKind::LossNet => "loss network",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Model(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl ModelFile {
    pub fn new(kind: ModelKind) -> Self {
        ModelFile {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn push<T: Element>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.entries.push(Entry {
            name: name.into(),
            tensor: tensor.cast(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(self.kind.tag().to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend((e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(f32::DTYPE_TAG);
            out.extend((e.tensor.rank() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Model(format!("truncated: {} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Model("bad magic, not an EPNN model file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Model(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x}): file is corrupted or truncated"
            )));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let tag = r.u32("model kind")?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::Model(format!("unknown model kind {tag}")))?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = r.u32("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "entry name")?)
                .map_err(|_| Error::Model(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let dtype = r.take(1, "dtype tag")?[0];
            if dtype != f32::DTYPE_TAG {
                return Err(Error::Model(format!("entry `{name}` has unsupported dtype tag {dtype}")));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Model(format!("entry `{name}` extents overflow")))?;
            let raw = r.take(n, &format!("data of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| Error::Model(format!("entry `{name}`: {e}")))?;
            entries.push(Entry { name, tensor });
        }
        if r.pos != body.len() {
            return Err(Error::Model(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(ModelFile { kind, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Model(m) => Error::Model(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
