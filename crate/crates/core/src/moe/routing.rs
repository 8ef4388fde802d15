// SPDX-License-Identifier: MIT OR Apache-2.0

//! Top-k expert selection.

use crate::error::{Error, Result};
use crate::moe::config::SoftmaxMode;

/// Experts picked for one token, best first, with their mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Picks the `k` largest logits (ties go to the lower expert index) and
/// computes their routing weights under `mode`.
pub fn top_k_select(logits: &[f64], k: usize, mode: SoftmaxMode) -> Result<Selection> {
    if k == 0 || k > logits.len() {
        return Err(Error::Contract(format!(
            "top-k with k = {k} over {} experts",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);

    let weights = match mode {
        SoftmaxMode::SoftmaxTopkRenormalize => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|g| (g - max).exp()).sum();
            let probs: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp() / z).collect();
            let kept: f64 = probs.iter().sum();
            probs.iter().map(|p| p / kept).collect()
        }
        SoftmaxMode::TopkSoftmax => {
            let max = logits[order[0]];
            let e: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        }
    };
    Ok(Selection {
        indices: order,
        weights,
    })
}
