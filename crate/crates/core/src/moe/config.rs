// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How routing weights are derived from the gate logits of selected experts.
///
/// Both variants produce weights that sum to one over the selected experts;
/// they differ in the order of floating-point operations, matching the two
/// conventions found in deployed MoE families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftmaxMode {
    /// Softmax over all experts, keep the top-k, renormalize (Mixtral-style).
    #[default]
    SoftmaxTopkRenormalize,
    /// Keep the top-k logits, softmax over those only.
    TopkSoftmax,
}

/// Geometry and seed of a toy MoE model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEConfig {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    /// Width of each expert's inner feed-forward layer.
    pub expert_hidden_dim: usize,
    /// Always-active experts that bypass routing (0 for a standard MoE).
    #[serde(default)]
    pub num_shared_experts: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub softmax_mode: SoftmaxMode,
    pub seed: u64,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.experts_per_layer == 0 {
            return bad("experts_per_layer must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return bad(format!(
                "top_k must lie in 1..={}, got {}",
                self.experts_per_layer, self.top_k
            ));
        }
        if self.hidden_dim == 0 || self.expert_hidden_dim == 0 || self.vocab_size == 0 {
            return bad("hidden_dim, expert_hidden_dim and vocab_size must be positive".into());
        }
        Ok(())
    }
}
