// SPDX-License-Identifier: MIT OR Apache-2.0

//! Selection-frequency accounting, behavior and utility evaluation, and
//! the `(λ, α, τ)` sweep harness.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{GateHook, InjectionPayload, ToyMoEModel};
use crate::numerics::Array;
use crate::steering::{build_injection_payload, optimize_mask, prune_mask, LayerStats, OptimizeConfig, SteeringMatrix};
use crate::surrogate::SurrogateParams;
use crate::traces::TraceDataset;

/// Repetition score at or above which an output counts as collapsed.
pub const DEFAULT_DEGENERACY_THRESHOLD: f64 = 0.6;

/// Fraction of tokens routing to each expert, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionFrequency {
    /// `L × E`, each row sums to `k`.
    pub freq: Array,
    pub tokens: usize,
    pub steered: bool,
}

fn hook_for(payload: Option<&InjectionPayload>) -> GateHook {
    match payload {
        Some(p) => GateHook::both(p.clone()),
        None => GateHook::capture(),
    }
}

/// Per-token top-k membership frequencies over every prompt.
pub fn selection_frequency(
    model: &ToyMoEModel,
    prompts: &[Vec<usize>],
    payload: Option<&InjectionPayload>,
) -> Result<SelectionFrequency> {
    if prompts.is_empty() {
        return Err(Error::Empty("selection frequency needs at least one prompt".into()));
    }
    let c = &model.config;
    let mut counts = Array::zeros(&[c.num_layers, c.experts_per_layer]);
    let mut tokens = 0;
    let hook = hook_for(payload);
    for p in prompts {
        let cap = model.forward(p, Some(&hook))?.capture.expect("capturing hook");
        for t in 0..cap.tokens {
            for l in 0..cap.layers {
                for &e in cap.selection(t, l) {
                    counts.set(l, e, counts.at(l, e) + 1.0);
                }
            }
        }
        tokens += cap.tokens;
    }
    Ok(SelectionFrequency {
        freq: counts.map(|v| v / tokens as f64),
        tokens,
        steered: payload.is_some(),
    })
}

/// `after − before`, per layer and expert.
pub fn frequency_delta(before: &SelectionFrequency, after: &SelectionFrequency) -> Result<Array> {
    if before.tokens != after.tokens {
        return Err(Error::Contract(format!(
            "frequencies come from different datasets ({} vs {} tokens)",
            before.tokens, after.tokens
        )));
    }
    after.freq.zip_map(&before.freq, |a, b| a - b)
}

/// `layer,expert,delta` CSV of a delta matrix.
pub fn delta_csv(delta: &Array) -> String {
    let mut out = String::from("layer,expert,delta\n");
    for l in 0..delta.rows() {
        for (e, v) in delta.row_slice(l).iter().enumerate() {
            let _ = writeln!(out, "{l},{e},{v}");
        }
    }
    out
}

/// `1 − distinct bigrams / total bigrams`; 0 for outputs shorter than two
/// tokens.
pub fn degeneracy_metric(tokens: &[usize]) -> f64 {
    if tokens.len() < 2 {
        return 0.0;
    }
    let mut pairs: Vec<(usize, usize)> = tokens.windows(2).map(|w| (w[0], w[1])).collect();
    let total = pairs.len() as f64;
    pairs.sort_unstable();
    pairs.dedup();
    1.0 - pairs.len() as f64 / total
}

/// Held-out task accuracy with and without a payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub before: f64,
    pub after: f64,
    /// `before − after`.
    pub decline: f64,
}

fn task_accuracy(model: &ToyMoEModel, task: &[(Vec<usize>, usize)], hook: Option<&GateHook>) -> Result<f64> {
    let mut hits = 0;
    for (tokens, target) in task {
        if model.forward(tokens, hook)?.last_token() == *target {
            hits += 1;
        }
    }
    Ok(hits as f64 / task.len() as f64)
}

/// Next-token accuracy on `task` before and after applying `payload`.
pub fn utility_eval(
    model: &ToyMoEModel,
    task: &[(Vec<usize>, usize)],
    payload: Option<&InjectionPayload>,
) -> Result<UtilityReport> {
    if task.is_empty() {
        return Err(Error::Empty("utility task".into()));
    }
    let before = task_accuracy(model, task, None)?;
    let after = match payload {
        None => before,
        Some(p) => task_accuracy(model, task, Some(&GateHook::inject(p.clone())))?,
    };
    Ok(UtilityReport {
        before,
        after,
        decline: before - after,
    })
}

/// Behavior success on a prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    /// Fraction of prompts that end in the target token with a coherent
    /// (non-degenerate) output.
    pub success_rate: f64,
    /// Fraction ending in the target token regardless of coherence.
    pub target_rate: f64,
    pub mean_degeneracy: f64,
    /// Fraction of outputs at or above the degeneracy threshold.
    pub degenerate_rate: f64,
}

/// Greedy per-position outputs of each prompt, scored against
/// `target_token` and the degeneracy threshold.
pub fn behavior_eval(
    model: &ToyMoEModel,
    prompts: &[Vec<usize>],
    target_token: usize,
    payload: Option<&InjectionPayload>,
    degeneracy_threshold: f64,
) -> Result<BehaviorReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("behavior prompts".into()));
    }
    let hook = payload.map(|p| GateHook::inject(p.clone()));
    let (mut ok, mut hit, mut deg_sum, mut deg_n) = (0usize, 0usize, 0.0, 0usize);
    for p in prompts {
        let out = model.forward(p, hook.as_ref())?.argmax_tokens();
        let deg = degeneracy_metric(&out);
        let on_target = out.last() == Some(&target_token);
        let degenerate = deg >= degeneracy_threshold;
        hit += usize::from(on_target);
        ok += usize::from(on_target && !degenerate);
        deg_n += usize::from(degenerate);
        deg_sum += deg;
    }
    let n = prompts.len() as f64;
    Ok(BehaviorReport {
        success_rate: ok as f64 / n,
        target_rate: hit as f64 / n,
        mean_degeneracy: deg_sum / n,
        degenerate_rate: deg_n as f64 / n,
    })
}

/// Axes of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    /// Threshold used for the `λ × α` grid.
    pub tau_fixed: f64,
    /// The collapse probe uses `max(alphas) · collapse_factor`.
    pub collapse_factor: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 1e-5, 1e-4, 1e-3],
            alphas: (1..=8).map(|i| 0.25 * i as f64).collect(),
            taus: vec![0.0, 0.1, 0.2, 0.5, 0.75],
            tau_fixed: 0.1,
            collapse_factor: 5.0,
        }
    }
}

/// Which part of the sweep a cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    Grid,
    Tau,
    Collapse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub kind: CellKind,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    /// `None` when the cell failed; see `error`.
    pub success: Option<f64>,
    pub utility_before: f64,
    pub utility_after: Option<f64>,
    pub nnz: usize,
    pub degenerate: bool,
    pub error: Option<String>,
}

/// Everything a sweep needs besides the grid.
pub struct SweepContext<'a> {
    pub model: &'a ToyMoEModel,
    pub surrogate: &'a SurrogateParams,
    /// Traces the steering matrix is optimized on.
    pub optimize_set: &'a TraceDataset,
    pub stats: &'a LayerStats,
    pub target: u8,
    pub target_token: usize,
    /// Prompts whose behavior should flip.
    pub flip_prompts: &'a [Vec<usize>],
    pub utility_task: &'a [(Vec<usize>, usize)],
    /// Optimizer settings; `lambda` is overridden per grid row.
    pub optimize: OptimizeConfig,
    pub degeneracy_threshold: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub baseline_success: f64,
    pub utility_before: f64,
    pub cells: Vec<SweepCell>,
    /// Best `(λ, α)` of the grid at `tau_fixed`.
    pub tuned: Option<(f64, f64)>,
    /// Optimized matrix per `λ`, in grid order (`None` if optimization failed).
    pub matrices: Vec<(f64, Option<SteeringMatrix>)>,
}

impl SweepResult {
    pub fn cells_of(&self, kind: CellKind) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(move |c| c.kind == kind)
    }

    /// Best grid cell at one `λ`.
    pub fn tuned_at(&self, lambda: f64) -> Option<&SweepCell> {
        best_cell(self.cells_of(CellKind::Grid).filter(|c| c.lambda == lambda))
    }

    pub fn matrix_for(&self, lambda: f64) -> Option<&SteeringMatrix> {
        self.matrices
            .iter()
            .find(|(l, _)| *l == lambda)
            .and_then(|(_, m)| m.as_ref())
    }

    /// `lambda,alpha,tau,success,utility_before,utility_after,nnz,degenerate`
    /// CSV; failed cells carry `failed` in the numeric columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,alpha,tau,success,utility_before,utility_after,nnz,degenerate\n");
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.lambda,
                c.alpha,
                c.tau,
                opt(c.success),
                c.utility_before,
                opt(c.utility_after),
                c.nnz,
                c.degenerate
            );
        }
        out
    }
}

/// Best scored cell: highest success, then highest utility after steering,
/// then the smaller `α`. Failed cells never win.
pub fn best_cell<'a>(cells: impl Iterator<Item = &'a SweepCell>) -> Option<&'a SweepCell> {
    let key = |x: &SweepCell| (x.success.unwrap_or(0.0), x.utility_after.unwrap_or(0.0));
    cells.filter(|c| c.success.is_some()).fold(None, |best, c| match best {
        None => Some(c),
        Some(b) => {
            let (kc, kb) = (key(c), key(b));
            if kc.0 > kb.0 || (kc.0 == kb.0 && (kc.1 > kb.1 || (kc.1 == kb.1 && c.alpha < b.alpha))) {
                Some(c)
            } else {
                Some(b)
            }
        }
    })
}

fn score_cell(
    ctx: &SweepContext<'_>,
    kind: CellKind,
    matrix: &SteeringMatrix,
    lambda: f64,
    alpha: f64,
    tau: f64,
    utility_before: f64,
) -> SweepCell {
    let run = || -> Result<(f64, f64, usize, bool)> {
        let mask = prune_mask(matrix, tau, lambda, Some(ctx.stats))?;
        let payload = build_injection_payload(&mask, alpha)?;
        let b = behavior_eval(
            ctx.model,
            ctx.flip_prompts,
            ctx.target_token,
            Some(&payload),
            ctx.degeneracy_threshold,
        )?;
        let u = utility_eval(ctx.model, ctx.utility_task, Some(&payload))?;
        Ok((b.success_rate, u.after, mask.nnz(), b.degenerate_rate > 0.5))
    };
    match run() {
        Ok((success, after, nnz, degenerate)) => SweepCell {
            kind,
            lambda,
            alpha,
            tau,
            success: Some(success),
            utility_before,
            utility_after: Some(after),
            nnz,
            degenerate,
            error: None,
        },
        Err(e) => failed_cell(kind, lambda, alpha, tau, utility_before, &e),
    }
}

fn failed_cell(kind: CellKind, lambda: f64, alpha: f64, tau: f64, utility_before: f64, e: &Error) -> SweepCell {
    SweepCell {
        kind,
        lambda,
        alpha,
        tau,
        success: None,
        utility_before,
        utility_after: None,
        nnz: 0,
        degenerate: false,
        error: Some(e.to_string()),
    }
}

/// Sweeps `λ × α` at `tau_fixed` (one optimization per `λ`), picks the best
/// cell (success, then utility, then smaller `α`), sweeps `τ` at that
/// `(λ, α)` and probes `max(α)·collapse_factor`. Independent work runs on up
/// to `jobs` threads; results do not depend on `jobs`.
pub fn run_sweep(ctx: &SweepContext<'_>, grid: &SweepGrid, jobs: usize) -> Result<SweepResult> {
    if grid.lambdas.is_empty() || grid.alphas.is_empty() {
        return Err(Error::Contract("sweep grid needs at least one λ and one α".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let baseline = behavior_eval(
        ctx.model,
        ctx.flip_prompts,
        ctx.target_token,
        None,
        ctx.degeneracy_threshold,
    )?;
    let utility_before = utility_eval(ctx.model, ctx.utility_task, None)?.before;

    let matrices: Vec<(f64, Result<SteeringMatrix>)> = pool.install(|| {
        grid.lambdas
            .par_iter()
            .map(|&lambda| {
                let cfg = OptimizeConfig { lambda, ..ctx.optimize };
                (lambda, optimize_mask(ctx.surrogate, ctx.optimize_set, ctx.target, ctx.stats, &cfg))
            })
            .collect()
    });

    let pairs: Vec<(usize, f64)> = (0..matrices.len())
        .flat_map(|i| grid.alphas.iter().map(move |&a| (i, a)))
        .collect();
    let mut cells: Vec<SweepCell> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(i, alpha)| {
                let (lambda, m) = &matrices[i];
                match m {
                    Ok(m) => score_cell(ctx, CellKind::Grid, m, *lambda, alpha, grid.tau_fixed, utility_before),
                    Err(e) => failed_cell(CellKind::Grid, *lambda, alpha, grid.tau_fixed, utility_before, e),
                }
            })
            .collect()
    });

    let tuned = best_cell(cells.iter()).map(|c| (c.lambda, c.alpha));

    if let Some((lambda, alpha)) = tuned {
        let m = matrices
            .iter()
            .find(|(l, _)| *l == lambda)
            .and_then(|(_, m)| m.as_ref().ok())
            .expect("tuned cell has a matrix");
        let max_alpha = grid.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let extra: Vec<SweepCell> = pool.install(|| {
            let mut jobs: Vec<(CellKind, f64, f64)> =
                grid.taus.iter().map(|&tau| (CellKind::Tau, alpha, tau)).collect();
            jobs.push((CellKind::Collapse, max_alpha * grid.collapse_factor, grid.tau_fixed));
            jobs.par_iter()
                .map(|&(kind, a, tau)| score_cell(ctx, kind, m, lambda, a, tau, utility_before))
                .collect()
        });
        cells.extend(extra);
    }

    Ok(SweepResult {
        grid: grid.clone(),
        baseline_success: baseline.success_rate,
        utility_before,
        cells,
        tuned,
        matrices: matrices.into_iter().map(|(l, m)| (l, m.ok())).collect(),
    })
}
