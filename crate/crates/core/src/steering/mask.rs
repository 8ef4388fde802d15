// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse steering masks and their JSON file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{atomic_write, read_file};
use crate::error::{Error, Result};
use crate::moe::InjectionPayload;
use crate::numerics::Array;
use crate::steering::{LayerStats, SteeringMatrix};

pub const MASK_FORMAT_VERSION: u32 = 1;

/// Pruned steering matrix. Only entries with `|value| > tau` are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringMask {
    pub version: u32,
    pub layers: usize,
    pub experts: usize,
    pub lambda: f64,
    pub tau: f64,
    pub alpha_recommended: Option<f64>,
    /// Scales the mask was optimized against; required for application.
    pub stats: Option<LayerStats>,
    /// `[layer, expert, value]` triples in row-major order.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SteeringMask {
    /// Dense `L × E` matrix with zeros where pruned.
    pub fn dense(&self) -> Array {
        let mut a = Array::zeros(&[self.layers, self.experts]);
        for &(l, e, v) in &self.entries {
            a.set(l, e, v);
        }
        a
    }

    /// Number of stored (non-pruned) entries.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `(layer, expert)` positions of the stored entries.
    pub fn support(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|&(l, e, _)| (l, e)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.version != MASK_FORMAT_VERSION {
            return Err(Error::Format {
                offset: 0,
                detail: format!("unsupported mask version {}, expected {MASK_FORMAT_VERSION}", self.version),
            });
        }
        for &(l, e, v) in &self.entries {
            if l >= self.layers || e >= self.experts || !v.is_finite() || v.abs() <= self.tau {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("invalid mask entry [{l}, {e}, {v}]"),
                });
            }
        }
        if let Some(s) = &self.stats {
            if s.sigma.len() != self.layers {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("{} layer scales for {} layers", s.sigma.len(), self.layers),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            detail: format!("bad mask file: {e}"),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
            offset: e.valid_up_to() as u64,
            detail: "mask file is not UTF-8".into(),
        })?;
        Self::from_json(text)
    }
}

/// Symmetric magnitude gate: keeps entries with `|S| > tau` (strict).
pub fn prune_mask(s: &SteeringMatrix, tau: f64, lambda: f64, stats: Option<&LayerStats>) -> Result<SteeringMask> {
    if !(tau >= 0.0) {
        return Err(Error::Contract(format!("tau must be non-negative, got {tau}")));
    }
    let (l_n, e_n) = (s.s.rows(), s.s.cols());
    let mut entries = Vec::new();
    for l in 0..l_n {
        for (e, &v) in s.s.row_slice(l).iter().enumerate() {
            if v.abs() > tau {
                entries.push((l, e, v));
            }
        }
    }
    Ok(SteeringMask {
        version: MASK_FORMAT_VERSION,
        layers: l_n,
        experts: e_n,
        lambda,
        tau,
        alpha_recommended: None,
        stats: stats.cloned(),
        entries,
    })
}

/// Payload adding `alpha·(σ_l·Ŝ_l)` to every gate before top-k.
pub fn build_injection_payload(mask: &SteeringMask, alpha: f64) -> Result<InjectionPayload> {
    let stats = mask
        .stats
        .as_ref()
        .ok_or_else(|| Error::Contract("mask carries no layer scales; cannot apply".into()))?;
    if stats.sigma.len() != mask.layers {
        return Err(Error::Contract(format!(
            "{} layer scales for a {}-layer mask",
            stats.sigma.len(),
            mask.layers
        )));
    }
    Ok(InjectionPayload::Additive {
        mask: mask.dense(),
        sigma: stats.sigma.clone(),
        alpha,
    })
}
