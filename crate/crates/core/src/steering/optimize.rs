// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering-matrix optimization through a frozen surrogate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Array, ParamGrad, Tape, Var};
use crate::steering::{init_steering_matrix, LayerStats, SteeringMatrix};
use crate::surrogate::graph::{self, Packing};
use crate::surrogate::SurrogateParams;
use crate::traces::{RoutingTrace, TraceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    /// L1 weight.
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl OptimizeConfig {
    pub fn new(lambda: f64, seed: u64) -> Self {
        Self {
            lambda,
            steps: 500,
            lr: 0.01,
            seed,
        }
    }
}

/// Loss components after one optimizer step's forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub l1: f64,
}

/// Builds the surrogate input and the L1-penalized term from the optimized
/// variable and the packed constant logits.
pub(crate) type InputMap<'a> = dyn Fn(&mut Tape, Var, Var) -> Result<(Var, Var)> + 'a;

/// The composite loss over a fixed packed batch.
struct Objective<'a> {
    surrogate: &'a SurrogateParams,
    packing: Packing,
    packed: Array,
    targets: Vec<f64>,
    lambda: f64,
    map: &'a InputMap<'a>,
}

impl<'a> Objective<'a> {
    fn new(
        surrogate: &'a SurrogateParams,
        traces: &[&RoutingTrace],
        target: u8,
        lambda: f64,
        map: &'a InputMap<'a>,
    ) -> Self {
        let packing = Packing::new(&traces.iter().map(|t| t.tokens()).collect::<Vec<_>>());
        let packed = packing.pack(traces);
        Self {
            surrogate,
            packing,
            packed,
            targets: vec![f64::from(target); traces.len()],
            lambda,
            map,
        }
    }

    /// Loss components at `theta` and the gradient of the total.
    fn evaluate(&self, theta: &Array) -> Result<(TrajectoryPoint, Array)> {
        let mut tape = Tape::new();
        let b = graph::bind(&mut tape, self.surrogate, false);
        let x = tape.constant(self.packed.clone());
        let th = tape.param(theta.clone());
        let (input, penalized) = (self.map)(&mut tape, th, x)?;
        let y = graph::logits(&mut tape, &b, self.surrogate, input, &self.packing)?;
        let bce = tape.bce_with_logits(y, &self.targets)?;
        let a = tape.abs(penalized);
        let l1 = tape.sum(a);
        let pen = tape.scale(l1, self.lambda);
        let loss = tape.add(bce, pen)?;
        let point = TrajectoryPoint {
            step: 0,
            loss: tape.scalar(loss),
            bce: tape.scalar(bce),
            l1: tape.scalar(l1),
        };
        let grad = tape.backward(loss)?.get(th);
        Ok((point, grad))
    }
}

/// Adam on `theta` alone, full batch, minimizing
/// `mean BCE(surrogate(map(theta, x)), target) + lambda·‖penalized‖₁`.
pub(crate) fn optimize_variable(
    surrogate: &SurrogateParams,
    traces: &[&RoutingTrace],
    target: u8,
    cfg: &OptimizeConfig,
    mut theta: Array,
    map: &InputMap<'_>,
) -> Result<(Array, Vec<TrajectoryPoint>)> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces to optimize on".into()));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Contract(format!("lambda must be non-negative, got {}", cfg.lambda)));
    }
    let problem = Objective::new(surrogate, traces, target, cfg.lambda, map);
    let mut state = AdamState::new([&theta]);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut trajectory = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (mut point, grad) = problem.evaluate(&theta)?;
        point.step = step;
        if !point.loss.is_finite() {
            return Err(Error::MaskDivergence { step, loss: point.loss });
        }
        let mut pg = [ParamGrad {
            name: "S",
            value: &mut theta,
            grad: &grad,
        }];
        adam_step(&mut pg, &mut state, &adam).map_err(|e| match e {
            Error::Optimizer { .. } => Error::MaskDivergence { step, loss: point.loss },
            other => other,
        })?;
        trajectory.push(point);
    }
    Ok((theta, trajectory))
}

/// `x + σ_l·S_l` broadcast over every packed token row; `S` is penalized.
fn steering_map(stats: &LayerStats) -> Result<impl Fn(&mut Tape, Var, Var) -> Result<(Var, Var)>> {
    let l_n = stats.sigma.len();
    let sigma = Array::matrix(l_n, 1, stats.sigma.clone())?;
    Ok(move |tape: &mut Tape, s: Var, x: Var| -> Result<(Var, Var)> {
        let e_n = tape.shape(s).1;
        let sig = tape.constant(sigma.clone());
        let scaled = tape.mul_col(s, sig)?;
        let row = tape.reshape(scaled, 1, l_n * e_n)?;
        Ok((tape.add_row(x, row)?, s))
    })
}

fn check_geometry(surrogate: &SurrogateParams, flip_set: &TraceDataset, stats: &LayerStats) -> Result<()> {
    let (l_n, e_n) = (flip_set.layers(), flip_set.experts());
    if l_n != surrogate.layers || e_n != surrogate.experts || stats.sigma.len() != l_n {
        return Err(Error::shape(
            "optimize_mask",
            format!(
                "traces {l_n}x{e_n}, surrogate {}x{}, {} layer scales",
                surrogate.layers,
                surrogate.experts,
                stats.sigma.len()
            ),
        ));
    }
    Ok(())
}

/// Value of the steering objective `mean BCE + lambda·‖S‖₁` at `s` and its
/// gradient with respect to `s`, exactly as seen by [`optimize_mask`].
pub fn steering_objective(
    surrogate: &SurrogateParams,
    flip_set: &TraceDataset,
    target: u8,
    stats: &LayerStats,
    s: &Array,
    lambda: f64,
) -> Result<(TrajectoryPoint, Array)> {
    check_geometry(surrogate, flip_set, stats)?;
    if s.shape() != [flip_set.layers(), flip_set.experts()] {
        return Err(Error::shape("steering_objective", format!("S has shape {:?}", s.shape())));
    }
    if flip_set.is_empty() {
        return Err(Error::Empty("no traces to evaluate on".into()));
    }
    let map = steering_map(stats)?;
    let refs: Vec<&RoutingTrace> = flip_set.traces().iter().collect();
    Objective::new(surrogate, &refs, target, lambda, &map).evaluate(s)
}

/// Optimizes a steering matrix `S` so that the frozen surrogate, fed the
/// adaptively scaled logits `g + σ_l·S_l` of every token of `flip_set`,
/// predicts `target`, under an L1 penalty `lambda·‖S‖₁`.
pub fn optimize_mask(
    surrogate: &SurrogateParams,
    flip_set: &TraceDataset,
    target: u8,
    stats: &LayerStats,
    cfg: &OptimizeConfig,
) -> Result<SteeringMatrix> {
    check_geometry(surrogate, flip_set, stats)?;
    let (l_n, e_n) = (flip_set.layers(), flip_set.experts());
    let init = init_steering_matrix(l_n, e_n, cfg.seed)?;
    let map = steering_map(stats)?;
    let refs: Vec<&RoutingTrace> = flip_set.traces().iter().collect();
    let (s, trajectory) = optimize_variable(surrogate, &refs, target, cfg, init.s, &map)?;
    if let Some(last) = trajectory.last() {
        tracing::info!(loss = last.loss, bce = last.bce, l1 = last.l1, "steering matrix optimized");
    }
    Ok(SteeringMatrix {
        s,
        init: init.init,
        seed: cfg.seed,
        trajectory,
    })
}
