// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use crate::container::{self, atomic_write, read_file};
use crate::error::{Error, Result};
use crate::surrogate::{SurrogateParams, PARAM_NAMES};

pub const SURROGATE_MAGIC: &[u8; 8] = b"MASCSUR1";

impl SurrogateParams {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({
            "embed_dim": self.embed_dim(),
            "hidden_dim": self.hidden_dim(),
            "layers": self.layers,
            "experts": self.experts,
            "seed": self.seed,
        });
        let blocks: Vec<(&str, &crate::Array)> = PARAM_NAMES.iter().copied().zip(self.arrays()).collect();
        container::encode(SURROGATE_MAGIC, &meta, &blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(SURROGATE_MAGIC, bytes)?;
        let field = |k: &str| {
            c.meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Format {
                offset: 12,
                detail: format!("surrogate header lacks `{k}`"),
            })
        };
        let (layers, experts, embed, hidden, seed) = (
            field("layers")? as usize,
            field("experts")? as usize,
            field("embed_dim")? as usize,
            field("hidden_dim")? as usize,
            field("seed")?,
        );
        let mut p = Self::init(layers, experts, embed, hidden, seed);
        for (name, slot) in PARAM_NAMES.iter().zip(p.arrays_mut()) {
            *slot = c.block(name)?.clone();
        }
        if c.blocks.len() != PARAM_NAMES.len() {
            return Err(Error::Format {
                offset: 12,
                detail: format!("{} blocks, expected {}", c.blocks.len(), PARAM_NAMES.len()),
            });
        }
        p.validate().map_err(|e| Error::Format {
            offset: 12,
            detail: e.to_string(),
        })?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
