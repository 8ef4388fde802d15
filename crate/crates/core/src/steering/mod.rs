// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering matrices: per-layer scale statistics, optimization through a
//! frozen surrogate, symmetric magnitude pruning and hook payloads.
//!
//! An intervention on layer `l` is always applied as `g + σ_l·S_l`, with
//! `σ_l` the standard deviation of unsteered logits at that layer, so one
//! unit of `S` means "one typical logit spread" on every layer.

mod expert;
mod mask;
mod optimize;

pub use expert::{
    expert_steering_pipeline, occupancy_dataset, ExpertMask, ExpertSteeringConfig, ExpertSteeringResult,
};
pub use mask::{build_injection_payload, prune_mask, SteeringMask, MASK_FORMAT_VERSION};
pub use optimize::{optimize_mask, steering_objective, OptimizeConfig, TrajectoryPoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Array};
use crate::traces::TraceDataset;

/// Lower bound on any per-layer scale.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Per-layer standard deviations of unsteered gate logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub sigma: Vec<f64>,
    /// Identifier of the dataset the statistics were computed on.
    pub dataset_id: String,
    /// Number of traces used.
    pub samples: usize,
}

impl LayerStats {
    pub fn new(sigma: Vec<f64>, dataset_id: impl Into<String>, samples: usize) -> Result<Self> {
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Contract("layer scales must be positive and finite".into()));
        }
        Ok(Self {
            sigma,
            dataset_id: dataset_id.into(),
            samples,
        })
    }
}

/// Population standard deviation per layer over every token, trace and
/// expert, floored at [`SIGMA_FLOOR`].
pub fn compute_layer_sigma(dataset: &TraceDataset, dataset_id: &str) -> Result<LayerStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot compute layer scales of an empty dataset".into()));
    }
    let l_n = dataset.layers();
    let mut sigma = Vec::with_capacity(l_n);
    for l in 0..l_n {
        let values = || {
            dataset
                .traces()
                .iter()
                .flat_map(move |tr| (0..tr.tokens()).flat_map(move |t| tr.at(t, l).iter().copied()))
        };
        let n = values().count() as f64;
        let mean = values().sum::<f64>() / n;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        sigma.push(var.sqrt().max(SIGMA_FLOOR));
    }
    LayerStats::new(sigma, dataset_id, dataset.len())
}

/// Dense `L × E` steering matrix and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringMatrix {
    pub s: Array,
    pub init: String,
    pub seed: u64,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl SteeringMatrix {
    pub fn final_loss(&self) -> Option<f64> {
        self.trajectory.last().map(|p| p.loss)
    }

    pub fn l1_norm(&self) -> f64 {
        self.s.l1_norm()
    }
}

/// Kaiming-uniform initialization with fan-in `E`: entries i.i.d. on
/// `[−√(6/E), √(6/E)]`.
pub fn init_steering_matrix(layers: usize, experts: usize, seed: u64) -> Result<SteeringMatrix> {
    if layers == 0 || experts == 0 {
        return Err(Error::Contract("steering matrix needs L, E >= 1".into()));
    }
    let bound = (6.0 / experts as f64).sqrt();
    let mut rng = seeded_rng(seed);
    let data = (0..layers * experts).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(SteeringMatrix {
        s: Array::matrix(layers, experts, data)?,
        init: "kaiming-uniform".into(),
        seed,
        trajectory: Vec::new(),
    })
}

/// `g_l + σ_l·S_l` for one token's `L × E` logits.
pub fn scale_and_add(g: &Array, s: &Array, stats: &LayerStats) -> Result<Array> {
    if g.shape() != s.shape() || g.rows() != stats.sigma.len() {
        return Err(Error::shape(
            "scale_and_add",
            format!("logits {:?}, S {:?}, {} layer scales", g.shape(), s.shape(), stats.sigma.len()),
        ));
    }
    let mut out = g.clone();
    for (l, &sig) in stats.sigma.iter().enumerate() {
        for (o, &m) in out.row_slice_mut(l).iter_mut().zip(s.row_slice(l)) {
            *o += sig * m;
        }
    }
    Ok(out)
}
