// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{rng, uniform};
use moesteer::analysis::{
    behavior_eval, best_cell, degeneracy_metric, delta_csv, frequency_delta, run_sweep, selection_frequency,
    utility_eval, CellKind, SweepCell, SweepContext, SweepGrid, SweepResult,
};
use moesteer::moe::fixture::{behavior_prompts, label_output, utility_task, OUT_B};
use moesteer::moe::{build_planted_fixture, Behavior, CircuitSpec, InjectionPayload, MoEConfig, SoftmaxMode, ToyMoEModel};
use moesteer::steering::{compute_layer_sigma, ExpertMask, OptimizeConfig};
use moesteer::surrogate::{train_surrogate, SurrogateConfig};
use moesteer::traces::collect_traces;
use moesteer::Array;
use proptest::prelude::*;
use rand::Rng;

fn fixture(seed: u64) -> (ToyMoEModel, CircuitSpec) {
    let spec = CircuitSpec::rotating(4, 8, 2).unwrap();
    (build_planted_fixture(&spec.model_config(8, 2, seed), &spec).unwrap(), spec)
}

fn prompts(spec: &CircuitSpec, per_class: usize, seed: u64) -> Vec<Vec<usize>> {
    behavior_prompts(spec, per_class, seed).into_iter().map(|p| p.tokens).collect()
}

fn additive(mask: Array, sigma: Vec<f64>, alpha: f64) -> InjectionPayload {
    InjectionPayload::Additive { mask, sigma, alpha }
}

/// Router whose gate logits at every layer are the token's own i.i.d.
/// embedding, so no expert is favoured in distribution.
fn symmetric_router(experts: usize, vocab: usize, seed: u64) -> ToyMoEModel {
    let cfg = MoEConfig {
        num_layers: 2,
        experts_per_layer: experts,
        top_k: 2,
        hidden_dim: experts,
        expert_hidden_dim: 1,
        num_shared_experts: 0,
        vocab_size: vocab,
        softmax_mode: SoftmaxMode::default(),
        seed,
    };
    let mut m = ToyMoEModel::zeros(cfg);
    let mut r = rng(seed);
    m.embedding = uniform(&mut r, vocab, experts, -1.0, 1.0);
    for layer in &mut m.layers {
        layer.gate_w = Array::identity(experts);
    }
    m
}

#[test]
fn frequencies_sum_to_k_per_layer() {
    let (model, spec) = fixture(0);
    let f = selection_frequency(&model, &prompts(&spec, 20, 1), None).unwrap();
    assert!(!f.steered);
    for l in 0..4 {
        assert!((f.freq.row_slice(l).iter().sum::<f64>() - 2.0).abs() < 1e-9);
    }
}

#[test]
fn forced_expert_has_full_frequency() {
    let (model, spec) = fixture(1);
    let mut mask = ExpertMask::empty(4, 8);
    mask.forced[2].push(5);
    let f = selection_frequency(&model, &prompts(&spec, 10, 2), Some(&mask.payload())).unwrap();
    assert_eq!(f.freq.at(2, 5), 1.0);
    assert!(f.steered);
}

#[test]
fn symmetric_router_spreads_selections_evenly() {
    let (experts, vocab) = (8, 2000);
    let model = symmetric_router(experts, vocab, 3);
    let mut r = rng(4);
    let ps: Vec<Vec<usize>> = (0..1000).map(|_| (0..10).map(|_| r.random_range(0..vocab)).collect()).collect();
    let f = selection_frequency(&model, &ps, None).unwrap();
    assert!(f.tokens >= 10_000);
    let even = 2.0 / experts as f64;
    for v in f.freq.data() {
        assert!((v - even).abs() <= 0.05, "{v} vs {even}");
    }
}

#[test]
fn boosting_an_expert_raises_its_share() {
    let (model, spec) = fixture(2);
    let ps = prompts(&spec, 30, 5);
    let e = spec.b_sets[0][0];
    let mut mask = Array::zeros(&[4, 8]);
    mask.set(0, e, 1.0);
    let payload = additive(mask, vec![3.0; 4], 1.0);
    let before = selection_frequency(&model, &ps, None).unwrap();
    let after = selection_frequency(&model, &ps, Some(&payload)).unwrap();
    let delta = frequency_delta(&before, &after).unwrap();
    assert!(delta.at(0, e) > 0.0);
    assert!(delta.row_slice(0).iter().any(|&d| d < 0.0));
    for l in 0..4 {
        assert!(delta.row_slice(l).iter().sum::<f64>().abs() < 1e-9);
    }
    assert_eq!(frequency_delta(&before, &before).unwrap(), Array::zeros(&[4, 8]));
    let csv = delta_csv(&delta);
    assert!(csv.starts_with("layer,expert,delta\n"));
    assert_eq!(csv.lines().count(), 1 + 32);
}

#[test]
fn delta_of_different_datasets_is_rejected() {
    let (model, spec) = fixture(0);
    let a = selection_frequency(&model, &prompts(&spec, 5, 1), None).unwrap();
    let b = selection_frequency(&model, &prompts(&spec, 6, 1), None).unwrap();
    assert!(frequency_delta(&a, &b).is_err());
}

#[test]
fn degeneracy_examples() {
    let abab: Vec<usize> = (0..10).map(|i| i % 2).collect();
    assert!((degeneracy_metric(&abab) - (1.0 - 2.0 / 9.0)).abs() < 1e-12);
    assert!((degeneracy_metric(&abab) - 0.778).abs() < 1e-3);
    assert_eq!(degeneracy_metric(&[4; 7]), 1.0 - 1.0 / 6.0);
    assert_eq!(degeneracy_metric(&[1, 2, 3, 4, 5]), 0.0);
}

#[test]
fn utility_is_identity_without_steering() {
    let (model, spec) = fixture(3);
    let task = utility_task(&spec, 60, 9);
    let plain = utility_eval(&model, &task, None).unwrap();
    assert_eq!(plain.before, plain.after);
    assert_eq!(plain.decline, 0.0);
    let zero = utility_eval(&model, &task, Some(&additive(Array::zeros(&[4, 8]), vec![2.0; 4], 1.5))).unwrap();
    assert_eq!(zero.decline, 0.0);
    assert!(utility_eval(&model, &[], None).is_err());
}

#[test]
fn planted_fixture_solves_the_utility_task() {
    let (model, spec) = fixture(4);
    let report = utility_eval(&model, &utility_task(&spec, 100, 11), None).unwrap();
    assert!(report.before >= 0.9, "utility accuracy {}", report.before);
}

#[test]
fn behavior_eval_counts_target_and_degenerate_outputs() {
    let (model, spec) = fixture(5);
    let flag_b: Vec<Vec<usize>> = behavior_prompts(&spec, 30, 12)
        .into_iter()
        .filter(|p| p.behavior == Behavior::B)
        .map(|p| p.tokens)
        .collect();
    let r = behavior_eval(&model, &flag_b, OUT_B, None, 0.6).unwrap();
    assert!(r.target_rate >= r.success_rate);
    assert!(r.success_rate > 0.5);
    assert!(r.mean_degeneracy < 0.3, "healthy outputs score {:.3}", r.mean_degeneracy);
    // With threshold 0 every output counts as degenerate.
    let all = behavior_eval(&model, &flag_b, OUT_B, None, 0.0).unwrap();
    assert_eq!((all.success_rate, all.degenerate_rate), (0.0, 1.0));
}

fn cell(alpha: f64, success: Option<f64>, after: Option<f64>) -> SweepCell {
    SweepCell {
        kind: CellKind::Grid,
        lambda: 1e-4,
        alpha,
        tau: 0.1,
        success,
        utility_before: 1.0,
        utility_after: after,
        nnz: 3,
        degenerate: false,
        error: None,
    }
}

#[test]
fn best_cell_prefers_success_then_utility_then_small_alpha() {
    let cells = [
        cell(0.5, Some(0.8), Some(0.9)),
        cell(1.0, Some(0.9), Some(0.7)),
        cell(1.5, Some(0.9), Some(0.95)),
        cell(2.0, Some(0.9), Some(0.95)),
        cell(0.25, None, None),
    ];
    assert_eq!(best_cell(cells.iter()).unwrap().alpha, 1.5);
    assert!(best_cell(cells[4..].iter()).is_none());
}

fn small_sweep(jobs: usize) -> SweepResult {
    let (model, spec) = fixture(0);
    let ds = collect_traces(&model, &prompts(&spec, 60, 20), label_output).unwrap().dataset.balanced();
    let cfg = SurrogateConfig {
        epochs: 3,
        ..SurrogateConfig::new(0)
    };
    let (sur, _) = train_surrogate(&ds, &cfg).unwrap();
    let stats = compute_layer_sigma(&ds, "s").unwrap();
    let flip_set = ds.with_label(0);
    let flip_prompts: Vec<Vec<usize>> = behavior_prompts(&spec, 20, 21)
        .into_iter()
        .filter(|p| p.behavior == Behavior::A)
        .map(|p| p.tokens)
        .collect();
    let task = utility_task(&spec, 20, 22);
    let ctx = SweepContext {
        model: &model,
        surrogate: &sur,
        optimize_set: &flip_set,
        stats: &stats,
        target: 1,
        target_token: OUT_B,
        flip_prompts: &flip_prompts,
        utility_task: &task,
        optimize: OptimizeConfig {
            steps: 40,
            ..OptimizeConfig::new(1e-4, 0)
        },
        degeneracy_threshold: 0.6,
    };
    let grid = SweepGrid {
        // A negative λ makes its optimization fail; its cells must still appear.
        lambdas: vec![0.0, 1e-4, -1.0],
        alphas: vec![0.0, 1.0, 2.0],
        taus: vec![0.0, 0.5],
        tau_fixed: 0.1,
        collapse_factor: 5.0,
    };
    run_sweep(&ctx, &grid, jobs).unwrap()
}

#[test]
fn sweep_is_deterministic_and_zero_alpha_is_baseline() {
    let a = small_sweep(1);
    let b = small_sweep(2);
    assert_eq!(a.cells, b.cells);
    assert_eq!(a.tuned, b.tuned);
    assert_eq!(a.to_csv(), b.to_csv());

    assert_eq!(a.cells_of(CellKind::Grid).count(), 9);
    let failed: Vec<&SweepCell> = a.cells_of(CellKind::Grid).filter(|c| c.lambda < 0.0).collect();
    assert_eq!(failed.len(), 3);
    assert!(failed.iter().all(|c| c.success.is_none() && c.error.as_deref().is_some_and(|e| e.contains("lambda"))));
    assert!(a.matrix_for(-1.0).is_none());
    assert!(a.tuned.is_some_and(|(l, _)| l >= 0.0));
    assert_eq!(a.cells_of(CellKind::Tau).count(), 2);
    assert_eq!(a.cells_of(CellKind::Collapse).count(), 1);
    for c in a.cells_of(CellKind::Grid).filter(|c| c.alpha == 0.0 && c.lambda >= 0.0) {
        assert_eq!(c.success, Some(a.baseline_success));
        assert_eq!(c.utility_after, Some(a.utility_before));
    }
    let collapse = a.cells_of(CellKind::Collapse).next().unwrap();
    assert_eq!(collapse.alpha, 10.0);
    assert!(a.matrix_for(1e-4).is_some());
    assert_eq!(a.to_csv().lines().count(), 1 + a.cells.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn steered_frequencies_still_sum_to_k(
        vals in prop::collection::vec(-2.0f64..2.0, 32),
        alpha in 0.0f64..4.0,
        seed in 0u64..20,
    ) {
        let (model, spec) = fixture(seed);
        let mask = Array::matrix(4, 8, vals).unwrap();
        let ps = prompts(&spec, 3, seed);
        let f = selection_frequency(&model, &ps, Some(&additive(mask, vec![2.5; 4], alpha))).unwrap();
        for l in 0..4 {
            prop_assert!((f.freq.row_slice(l).iter().sum::<f64>() - 2.0).abs() < 1e-9);
            prop_assert!(f.freq.row_slice(l).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn degeneracy_lies_in_unit_interval(tokens in prop::collection::vec(0usize..5, 1..30)) {
        let d = degeneracy_metric(&tokens);
        prop_assert!((0.0..1.0).contains(&d) || (tokens.len() < 2 && d == 0.0));
    }
}
