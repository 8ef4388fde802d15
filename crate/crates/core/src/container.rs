// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container shared by model and surrogate checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes      e.g. "MASCMOD1", "MASCSUR1"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! blocks       f64 LE values, one block per entry of header.blocks, in order
//! ```
//!
//! The JSON header always carries `format_version` and `blocks`
//! (`[{"name": .., "shape": [..]}]`); everything else is owner-defined.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Array;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Decoded container: owner metadata plus named parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub blocks: Vec<(String, Array)>,
}

impl Container {
    /// Block by name.
    pub fn block(&self, name: &str) -> Result<&Array> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("missing parameter block `{name}`"),
            })
    }
}

/// Serializes `meta` and `blocks` behind `magic`.
pub fn encode(magic: &[u8; 8], meta: &Value, blocks: &[(&str, &Array)]) -> Result<Vec<u8>> {
    let infos: Vec<BlockInfo> = blocks
        .iter()
        .map(|(n, a)| BlockInfo {
            name: (*n).to_string(),
            shape: a.shape().to_vec(),
        })
        .collect();
    let header = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "blocks": infos,
    });
    let header = serde_json::to_vec(&header)?;
    let n_values: usize = blocks.iter().map(|(_, a)| a.len()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 8 * n_values);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in blocks {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses bytes written by [`encode`], checking the magic and version.
pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Container> {
    let mut r = Reader::new(bytes);
    let got = r.take(8)?;
    if got != magic {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let header_len = r.u32()? as usize;
    let header_at = r.offset();
    let header: Value = serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Format {
        offset: header_at,
        detail: format!("unreadable JSON header: {e}"),
    })?;
    let version = header
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format {
            offset: header_at,
            detail: "header lacks format_version".into(),
        })?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Format {
            offset: header_at,
            detail: format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let infos: Vec<BlockInfo> = serde_json::from_value(header.get("blocks").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Format {
            offset: header_at,
            detail: format!("bad block table: {e}"),
        })?;
    let mut blocks = Vec::with_capacity(infos.len());
    for info in infos {
        let n: usize = info.shape.iter().product();
        let at = r.offset();
        let data = r.f64s(n).map_err(|_| Error::Format {
            offset: at,
            detail: format!("truncated block `{}` ({n} values expected)", info.name),
        })?;
        blocks.push((info.name, Array::new(info.shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(Container {
        meta: header.get("meta").cloned().unwrap_or(Value::Null),
        blocks,
    })
}

/// Minimal cursor over a byte slice that reports offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.offset(),
                detail: format!("truncated: wanted {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.offset(),
            detail: "block size overflow".into(),
        })?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Format {
            offset: self.offset(),
            detail: "block size overflow".into(),
        })?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads a whole file, mapping the error to [`Error::Io`].
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
