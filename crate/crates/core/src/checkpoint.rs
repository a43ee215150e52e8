//! On-disk container for named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..4             | magic `KAIR`                              |
//! | 4..8             | format version, `u32` (= 1)               |
//! | 8..16            | header length `L`, `u64`                  |
//! | 16..16+L         | UTF-8 JSON header                         |
//! | 16+L..           | payload                                   |
//!
//! The header is `{"metadata": {..}, "entries": [{"name", "shape",
//! "offset", "length"}, ..]}` with entries sorted by name. Offsets are
//! relative to the first payload byte and are multiples of 8; the gap
//! between consecutive entries is zero-filled. Payloads are little-endian
//! `f32`, so `length = 4 · Π shape`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: &[u8; 4] = b"KAIR";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const ALIGN: u64 = 8;

pub type TensorMap = BTreeMap<String, Tensor>;
pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: Metadata,
    entries: Vec<EntryRecord>,
}

/// A decoded container: tensors keyed by name plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: Metadata,
    pub tensors: TensorMap,
}

impl TensorContainer {
    pub fn new(tensors: TensorMap, metadata: Metadata) -> Self {
        Self { metadata, tensors }
    }

    /// Entry records in file order, with their payload offsets.
    pub fn entries(&self) -> Vec<EntryRecord> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let length = 4 * t.numel() as u64;
                let rec = EntryRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset = (offset + length).next_multiple_of(ALIGN);
                rec
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.tensors.keys().any(|k| k.is_empty()) {
            return Err(Error::Format("tensor names must be non-empty".into()));
        }
        let entries = self.entries();
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            entries: entries.clone(),
        })?;
        let payload_len = entries.last().map_or(0, |e| e.offset + e.length) as usize;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let base = out.len();
        for (rec, tensor) in entries.iter().zip(self.tensors.values()) {
            out.resize(base + rec.offset as usize, 0);
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a complete container image. Every length and offset in the
    /// header is checked against the buffer before any payload is copied.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {PREAMBLE}-byte preamble",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let available = (bytes.len() - PREAMBLE) as u64;
        if header_len > available {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds remaining {available} bytes"
            )));
        }
        let header_end = PREAMBLE + header_len as usize;
        let header_text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header: Header = serde_json::from_str(header_text)
            .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
        let payload = &bytes[header_end..];

        let mut names = BTreeSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            if e.name.is_empty() {
                return Err(Error::Format("empty tensor name".into()));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name `{}`", e.name)));
            }
            let numel = checked_numel(&e.shape).map_err(|err| Error::Corruption {
                entry: e.name.clone(),
                reason: format!("invalid shape {:?}: {err}", e.shape),
            })?;
            let expected = (numel as u64).checked_mul(4);
            if expected != Some(e.length) {
                return Err(Error::Corruption {
                    entry: e.name.clone(),
                    reason: format!(
                        "length {} does not match shape {:?} (expected {} bytes)",
                        e.length,
                        e.shape,
                        numel.saturating_mul(4)
                    ),
                });
            }
            if e.offset % ALIGN != 0 {
                return Err(Error::Corruption {
                    entry: e.name.clone(),
                    reason: format!("offset {} is not {ALIGN}-byte aligned", e.offset),
                });
            }
            let end = e
                .offset
                .checked_add(e.length)
                .ok_or_else(|| Error::Corruption {
                    entry: e.name.clone(),
                    reason: "offset + length overflows".into(),
                })?;
            if end > payload.len() as u64 {
                return Err(Error::Corruption {
                    entry: e.name.clone(),
                    reason: format!(
                        "payload truncated: entry ends at {end}, payload has {} bytes",
                        payload.len()
                    ),
                });
            }
            spans.push((e.offset, end, &e.name));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Corruption {
                    entry: pair[1].2.to_string(),
                    reason: format!("overlaps entry `{}`", pair[0].2),
                });
            }
        }

        let mut tensors = TensorMap::new();
        for e in header.entries {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> TensorMap {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

pub fn write_container(tensors: &TensorMap, metadata: &Metadata, path: &Path) -> Result<()> {
    TensorContainer::new(tensors.clone(), metadata.clone()).write(path)
}

pub fn read_container(path: &Path) -> Result<(TensorMap, Metadata)> {
    let c = TensorContainer::read(path)?;
    Ok((c.tensors, c.metadata))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let ctx = || format!("writing {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(ctx(), e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(ctx(), e))?;
    // Temp files are created owner-only; give the result ordinary permissions.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = fs::metadata(path).map_or(0o644, |m| m.permissions().mode());
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(mode))
            .map_err(|e| Error::io(ctx(), e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(ctx(), e.error))?;
    Ok(())
}
