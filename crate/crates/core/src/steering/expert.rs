// SPDX-License-Identifier: MIT OR Apache-2.0

//! Discrete expert-steering baseline.
//!
//! A surrogate is trained on binary top-k occupancy sequences instead of
//! logits. A relaxed mask `m = sigmoid(θ)` switches experts on through
//! `o' = X + (1 − X)⊙m`, is optimized with the same composite loss as the
//! steering matrix, and is thresholded at 0.5. Selected experts are forced
//! into the top-k by overwriting their logits with [`FORCE_LOGIT`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{top_k_select, InjectionPayload, SoftmaxMode, FORCE_LOGIT};
use crate::numerics::{Array, Tape, Var};
use crate::steering::init_steering_matrix;
use crate::steering::optimize::{optimize_variable, OptimizeConfig, TrajectoryPoint};
use crate::surrogate::{train_surrogate, SurrogateConfig, SurrogateParams, TrainHistory};
use crate::traces::{RoutingTrace, TraceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSteeringConfig {
    pub top_k: usize,
    /// Forced experts allowed per layer; `None` means `top_k − 1`.
    pub max_forced_per_layer: Option<usize>,
    pub surrogate: SurrogateConfig,
    pub optimize: OptimizeConfig,
}

/// Binary set of forced experts per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMask {
    pub layers: usize,
    pub experts: usize,
    pub forced: Vec<Vec<usize>>,
    pub force_value: f64,
}

impl ExpertMask {
    pub fn empty(layers: usize, experts: usize) -> Self {
        Self {
            layers,
            experts,
            forced: vec![Vec::new(); layers],
            force_value: FORCE_LOGIT,
        }
    }

    /// `L × E` 0/1 matrix.
    pub fn binary(&self) -> Array {
        let mut a = Array::zeros(&[self.layers, self.experts]);
        for (l, set) in self.forced.iter().enumerate() {
            for &e in set {
                a.set(l, e, 1.0);
            }
        }
        a
    }

    pub fn count(&self) -> usize {
        self.forced.iter().map(Vec::len).sum()
    }

    pub fn payload(&self) -> InjectionPayload {
        InjectionPayload::Force {
            forced: self.forced.clone(),
            value: self.force_value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertSteeringResult {
    pub mask: ExpertMask,
    pub surrogate: SurrogateParams,
    pub history: TrainHistory,
    /// Relaxed mask `sigmoid(θ)` after optimization.
    pub relaxed: Array,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Replaces each token's logits by the 0/1 indicator of its top-k experts.
pub fn occupancy_dataset(dataset: &TraceDataset, top_k: usize) -> Result<TraceDataset> {
    let (l_n, e_n) = (dataset.layers(), dataset.experts());
    if top_k == 0 || top_k > e_n {
        return Err(Error::Contract(format!("top_k must lie in 1..={e_n}")));
    }
    let mut out = TraceDataset::new(l_n, e_n);
    out.creator = dataset.creator.clone();
    out.convention = format!("top-{top_k} occupancy of: {}", dataset.convention);
    for tr in dataset.traces() {
        let mut occ = Array::zeros(tr.logits().shape());
        for t in 0..tr.tokens() {
            for l in 0..l_n {
                let sel = top_k_select(tr.at(t, l), top_k, SoftmaxMode::default())?;
                for e in sel.indices {
                    occ.data_mut()[(t * l_n + l) * e_n + e] = 1.0;
                }
            }
        }
        out.push(RoutingTrace::new(occ, tr.label(), tr.source.clone())?)?;
    }
    Ok(out)
}

/// Full baseline: occupancy surrogate, relaxed-mask optimization on the
/// flip set toward `target`, thresholding and the per-layer cap.
pub fn expert_steering_pipeline(
    dataset: &TraceDataset,
    flip_set: &TraceDataset,
    target: u8,
    config: &ExpertSteeringConfig,
) -> Result<ExpertSteeringResult> {
    let occ = occupancy_dataset(dataset, config.top_k)?;
    let (surrogate, history) = train_surrogate(&occ, &config.surrogate)?;
    let flip_occ = occupancy_dataset(flip_set, config.top_k)?;
    let (l_n, e_n) = (occ.layers(), occ.experts());

    let theta0 = init_steering_matrix(l_n, e_n, config.optimize.seed)?.s;
    let map = move |tape: &mut Tape, theta: Var, x: Var| -> Result<(Var, Var)> {
        let m = tape.sigmoid(theta);
        let row = tape.reshape(m, 1, l_n * e_n)?;
        let on = tape.add_row(x, row)?;
        let overlap = tape.mul_row(x, row)?;
        Ok((tape.sub(on, overlap)?, m))
    };
    let refs: Vec<&RoutingTrace> = flip_occ.traces().iter().collect();
    let (theta, trajectory) = optimize_variable(&surrogate, &refs, target, &config.optimize, theta0, &map)?;
    let relaxed = theta.map(crate::numerics::sigmoid);

    let cap = config
        .max_forced_per_layer
        .unwrap_or(config.top_k.saturating_sub(1))
        .min(config.top_k);
    let mut mask = ExpertMask::empty(l_n, e_n);
    for (l, set) in mask.forced.iter_mut().enumerate() {
        let mut on: Vec<(usize, f64)> = relaxed
            .row_slice(l)
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, m)| m > 0.5)
            .collect();
        on.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        on.truncate(cap);
        set.extend(on.into_iter().map(|(e, _)| e));
        set.sort_unstable();
    }
    tracing::info!(forced = mask.count(), "expert mask optimized");
    Ok(ExpertSteeringResult {
        mask,
        surrogate,
        history,
        relaxed,
        trajectory,
    })
}
