//! Checksummed binary container for datasets and checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `PJQL`, format version u32, metadata count u32 followed by
//! length-prefixed UTF-8 key/value pairs, block count u32 followed by
//! blocks (length-prefixed name, u32 rank, u64 dims, f64 payload), and a
//! trailing FNV-1a 64 checksum of every preceding byte.

use super::DatasetError;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: [u8; 4] = *b"PJQL";
const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Named f64 blocks plus string metadata; maps keep serialization order
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    meta: BTreeMap<String, String>,
    blocks: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, DatasetError> {
        self.meta(key).ok_or_else(|| DatasetError::MissingMeta { name: key.to_string() })
    }

    pub fn meta_keys(&self) -> impl Iterator<Item = &str> {
        self.meta.keys().map(String::as_str)
    }

    pub fn block_names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn add_block(
        &mut self,
        name: &str,
        dims: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<(), DatasetError> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(DatasetError::BadShape {
                context: format!(
                    "block {name:?}: dims {dims:?} imply {numel} values, got {}",
                    data.len()
                ),
            });
        }
        self.blocks.insert(name.to_string(), (dims, data));
        Ok(())
    }

    pub fn block(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.blocks.get(name).map(|(d, v)| (d.as_slice(), v.as_slice()))
    }

    pub fn require_block(&self, name: &str) -> Result<(&[usize], &[f64]), DatasetError> {
        self.block(name).ok_or_else(|| DatasetError::MissingBlock { name: name.to_string() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (key, value) in &self.meta {
            write_str(&mut out, key);
            write_str(&mut out, value);
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, (dims, data)) in &self.blocks {
            write_str(&mut out, name);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let checksum = fnv1a(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(DatasetError::Truncated { context: "header" });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("tail is eight bytes"));
        let computed = fnv1a(body);
        if stored != computed {
            return Err(DatasetError::ChecksumMismatch { stored, computed });
        }
        let mut cursor = Cursor { bytes: body, pos: 0 };
        let magic = cursor.take(4, "magic")?;
        if magic != MAGIC {
            return Err(DatasetError::BadMagic {
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = cursor.u32("format version")?;
        if version != VERSION {
            return Err(DatasetError::BadVersion { found: version, expected: VERSION });
        }
        let mut container = Self::new();
        let n_meta = cursor.u32("metadata count")?;
        for _ in 0..n_meta {
            let key = cursor.string("metadata key")?;
            let value = cursor.string("metadata value")?;
            container.meta.insert(key, value);
        }
        let n_blocks = cursor.u32("block count")?;
        for _ in 0..n_blocks {
            let name = cursor.string("block name")?;
            let rank = cursor.u32("block rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cursor.u64("block dimension")? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(
                    cursor.take(8, "block payload")?.try_into().expect("eight bytes"),
                ));
            }
            container.blocks.insert(name, (dims, data));
        }
        if cursor.pos != body.len() {
            return Err(DatasetError::Truncated { context: "trailing bytes after blocks" });
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.bytes.len() {
            return Err(DatasetError::Truncated { context });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self, context: &'static str) -> Result<String, DatasetError> {
        let len = self.u32(context)? as usize;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| DatasetError::BadMeta { context: format!("{context} is not UTF-8") })
    }
}
