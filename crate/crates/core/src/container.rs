//! Binary container for named `f32` arrays, used by checkpoints and
//! attention sidecars.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [0..8)    magic  b"RSPOTARR"
//! [8..12)   u32    format version
//! [12..20)  u64    header length H
//! [20..20+H)       JSON header {"kind", "meta", "arrays": [{name, shape, offset, len}]}
//! [20+H..)         raw f32 data; `offset` is in bytes from the start of this section
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RSPOTARR";
pub const CONTAINER_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayContainer {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f32>)>,
}

fn format_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

impl ArrayContainer {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        ArrayContainer {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: ArrayD<f32>) {
        self.arrays.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let entry = IndexEntry {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                    offset,
                    len: a.len() as u64,
                };
                offset += 4 * a.len() as u64;
                entry
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, a) in &self.arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
            return Err(format_error(path, 0, "not an array container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CONTAINER_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| format_error(path, 12, "header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start]).map_err(|e| {
            format_error(
                path,
                PREAMBLE + line_col_to_offset(&bytes[PREAMBLE..data_start], e.line(), e.column()),
                e.to_string(),
            )
        })?;
        let data = &bytes[data_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let count = entry.shape.iter().product::<usize>();
            if count as u64 != entry.len {
                return Err(format_error(
                    path,
                    data_start,
                    format!(
                        "array {} shape {:?} disagrees with len {}",
                        entry.name, entry.shape, entry.len
                    ),
                ));
            }
            let start = entry.offset as usize;
            let end = start + 4 * count;
            if end > data.len() {
                return Err(format_error(
                    path,
                    data_start + start,
                    format!("array {} runs past end of file", entry.name),
                ));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("count checked");
            arrays.push((entry.name, array));
        }
        Ok(ArrayContainer {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp: PathBuf = {
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".tmp");
            path.with_file_name(name)
        };
        let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(&self.to_bytes()).map_err(Error::io(&tmp))?;
        f.sync_all().map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Byte offset of a 1-based (line, column) position as reported by serde_json.
pub(crate) fn line_col_to_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}
