// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gate hooks: logit capture and pre-selection logit injection.
//!
//! A [`GateHook`] is attached to a forward pass and acts on every gate layer
//! *before* top-k selection. Capture always records the raw affine gate
//! output; when an injection payload is active it also records the modified
//! logits actually used for routing.

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Logit written for experts forced on by the discrete expert-steering
/// baseline. Finite so that softmax stays well defined.
pub const FORCE_LOGIT: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookMode {
    Capture,
    Inject,
    Both,
}

impl HookMode {
    pub fn captures(self) -> bool {
        matches!(self, Self::Capture | Self::Both)
    }

    pub fn injects(self) -> bool {
        matches!(self, Self::Inject | Self::Both)
    }
}

/// What an injecting hook does to the gate logits `g` of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub enum InjectionPayload {
    /// `g' = g + alpha * (sigma[l] * mask[l])`, element-wise.
    Additive {
        /// Dense `layers × experts` mask (zeros where pruned).
        mask: Array,
        /// Per-layer logit standard deviations.
        sigma: Vec<f64>,
        alpha: f64,
    },
    /// Overwrites the logits of the listed experts with `value`.
    Force {
        /// Forced expert indices per layer.
        forced: Vec<Vec<usize>>,
        value: f64,
    },
}

impl InjectionPayload {
    /// Checks the payload against a model with `layers × experts` gates and
    /// top-`k` routing.
    pub fn validate(&self, layers: usize, experts: usize, k: usize) -> Result<()> {
        match self {
            Self::Additive { mask, sigma, alpha } => {
                if mask.shape() != [layers, experts] {
                    return Err(Error::Injection(format!(
                        "mask shape {:?}, model gates are {layers}x{experts}",
                        mask.shape()
                    )));
                }
                if sigma.len() != layers {
                    return Err(Error::Injection(format!(
                        "{} layer scales for {layers} layers",
                        sigma.len()
                    )));
                }
                if !mask.is_finite() || !sigma.iter().all(|s| s.is_finite()) || !alpha.is_finite() {
                    return Err(Error::Injection("non-finite payload".into()));
                }
            }
            Self::Force { forced, value } => {
                if forced.len() != layers {
                    return Err(Error::Injection(format!(
                        "forced sets for {} layers, model has {layers}",
                        forced.len()
                    )));
                }
                for (l, set) in forced.iter().enumerate() {
                    if set.len() > k {
                        return Err(Error::Injection(format!(
                            "layer {l}: {} forced experts exceed top-k = {k}",
                            set.len()
                        )));
                    }
                    if let Some(&e) = set.iter().find(|&&e| e >= experts) {
                        return Err(Error::Injection(format!(
                            "layer {l}: forced expert {e} out of range"
                        )));
                    }
                }
                if !value.is_finite() {
                    return Err(Error::Injection("force value must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Applies the payload for `layer` to one token's logits in place.
    pub fn apply(&self, layer: usize, logits: &mut [f64]) {
        match self {
            Self::Additive { mask, sigma, alpha } => {
                let s = sigma[layer];
                for (g, &m) in logits.iter_mut().zip(mask.row_slice(layer)) {
                    *g += alpha * (s * m);
                }
            }
            Self::Force { forced, value } => {
                for &e in &forced[layer] {
                    logits[e] = *value;
                }
            }
        }
    }
}

/// Hook configuration for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateHook {
    pub mode: HookMode,
    pub payload: Option<InjectionPayload>,
}

impl GateHook {
    pub fn capture() -> Self {
        Self {
            mode: HookMode::Capture,
            payload: None,
        }
    }

    pub fn inject(payload: InjectionPayload) -> Self {
        Self {
            mode: HookMode::Inject,
            payload: Some(payload),
        }
    }

    pub fn both(payload: InjectionPayload) -> Self {
        Self {
            mode: HookMode::Both,
            payload: Some(payload),
        }
    }

    /// The payload when this hook injects.
    pub fn active_payload(&self) -> Option<&InjectionPayload> {
        if self.mode.injects() {
            self.payload.as_ref()
        } else {
            None
        }
    }
}

/// Routing record of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    /// Raw gate logits, `tokens × layers × experts`.
    pub pre: Array,
    /// Logits used for routing after injection (same shape), when injecting.
    pub post: Option<Array>,
    /// Selected experts, `tokens × layers × k`, best first.
    pub selected: Vec<usize>,
    /// Routing weights aligned with `selected`.
    pub weights: Vec<f64>,
    pub tokens: usize,
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
}

impl Capture {
    /// Selected experts of token `t` at layer `l`.
    pub fn selection(&self, t: usize, l: usize) -> &[usize] {
        let at = (t * self.layers + l) * self.top_k;
        &self.selected[at..at + self.top_k]
    }

    pub fn selection_weights(&self, t: usize, l: usize) -> &[f64] {
        let at = (t * self.layers + l) * self.top_k;
        &self.weights[at..at + self.top_k]
    }

    /// Pre-injection logits of token `t` at layer `l`.
    pub fn pre_logits(&self, t: usize, l: usize) -> &[f64] {
        let at = (t * self.layers + l) * self.experts;
        &self.pre.data()[at..at + self.experts]
    }
}
