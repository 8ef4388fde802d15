// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per subcommand. Each reads its inputs, writes one artifact
//! atomically and leaves a manifest beside it.

use std::path::Path;

use serde_json::{json, Value};

use moesteer::analysis::{
    behavior_eval, delta_csv, frequency_delta, run_sweep, selection_frequency, utility_eval, SweepContext,
};
use moesteer::container::{atomic_write, read_file};
use moesteer::moe::fixture::{behavior_prompts, circuit_of, label_output, utility_task};
use moesteer::moe::{build_planted_fixture, Behavior, CircuitSpec, ToyMoEModel};
use moesteer::steering::{build_injection_payload, compute_layer_sigma, optimize_mask, prune_mask, LayerStats, SteeringMask};
use moesteer::surrogate::{train_surrogate, SurrogateParams};
use moesteer::traces::{collect_traces, load_traces, save_traces, TraceDataset};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{sha256_hex, write_manifest};

/// Prompt streams drawn from one seed. Collection and evaluation prompts
/// must not coincide even when every seed in the config is equal.
#[derive(Clone, Copy)]
enum Stream {
    Collect = 1,
    Flip = 2,
    Utility = 3,
}

fn stream_seed(seed: u64, stream: Stream) -> u64 {
    seed.wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn planted_circuit(model: &ToyMoEModel) -> Result<CircuitSpec, CliError> {
    circuit_of(model).ok_or_else(|| CliError::Format("model checkpoint carries no planted circuit".into()))
}

fn dataset_id(path: &Path) -> Result<String, CliError> {
    let bytes = read_file(path)?;
    Ok(format!("traces:{}", &sha256_hex(&bytes)[..16]))
}

/// Prompts requesting the non-target behavior.
fn flip_prompts(cfg: &RunConfig, spec: &CircuitSpec) -> Vec<Vec<usize>> {
    let target = Behavior::from_label(cfg.steering.target).expect("validated target");
    behavior_prompts(spec, cfg.eval.flip_prompts, stream_seed(cfg.eval.seed, Stream::Flip))
        .into_iter()
        .filter(|p| p.behavior != target)
        .map(|p| p.tokens)
        .collect()
}

fn held_out_task(cfg: &RunConfig, spec: &CircuitSpec) -> Vec<(Vec<usize>, usize)> {
    utility_task(spec, cfg.eval.utility_samples, stream_seed(cfg.eval.seed, Stream::Utility))
}

/// Non-target traces the steering matrix is optimized on.
fn optimization_set(cfg: &RunConfig, traces: &TraceDataset) -> Result<TraceDataset, CliError> {
    let flip = traces.with_label(1 - cfg.steering.target);
    if flip.is_empty() {
        return Err(CliError::Other("no non-target traces to optimize on".into()));
    }
    let n = cfg.steering.optimize_traces.unwrap_or(flip.len()).min(flip.len());
    Ok(flip.subset(&(0..n).collect::<Vec<_>>()))
}

fn sigma(cfg: &RunConfig, traces: &TraceDataset) -> Result<LayerStats, CliError> {
    Ok(compute_layer_sigma(traces, &dataset_id(&cfg.paths.traces)?)?)
}

pub fn fixture(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.circuit()?;
    let f = &cfg.fixture;
    let model = build_planted_fixture(&spec.model_config(f.experts, f.top_k, f.seed), &spec)?;
    let out = &cfg.paths.model;
    ensure_parent(out)?;
    model.save(out)?;
    write_manifest(
        "fixture",
        cfg,
        &[],
        out,
        json!({ "parameters": model.param_count(), "vocab": spec.vocab_size() }),
    )
}

pub fn collect(cfg: &RunConfig) -> Result<(), CliError> {
    let model = ToyMoEModel::load(&cfg.paths.model)?;
    let spec = planted_circuit(&model)?;
    let prompts: Vec<Vec<usize>> = behavior_prompts(
        &spec,
        cfg.collect.prompts_per_class,
        stream_seed(cfg.collect.seed, Stream::Collect),
    )
    .into_iter()
    .map(|p| p.tokens)
    .collect();
    let collected = collect_traces(&model, &prompts, label_output)?;
    let dataset = if cfg.collect.balance {
        collected.dataset.balanced()
    } else {
        collected.dataset
    };
    let out = &cfg.paths.traces;
    ensure_parent(out)?;
    save_traces(&dataset, out)?;
    write_manifest(
        "collect",
        cfg,
        &[&cfg.paths.model],
        out,
        json!({
            "prompts": prompts.len(),
            "abstained": collected.abstained,
            "traces": dataset.len(),
            "class_counts": dataset.class_counts(),
        }),
    )
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let traces = load_traces(&cfg.paths.traces)?;
    let (params, history) = train_surrogate(&traces, &cfg.surrogate_config())?;
    let out = &cfg.paths.surrogate;
    ensure_parent(out)?;
    params.save(out)?;
    write_manifest(
        "train-surrogate",
        cfg,
        &[&cfg.paths.traces],
        out,
        json!({
            "train_size": history.train_size,
            "val_size": history.val_size,
            "train_loss": history.train_loss,
            "val_accuracy": history.val_accuracy,
        }),
    )
}

pub fn optimize(cfg: &RunConfig) -> Result<(), CliError> {
    let surrogate = SurrogateParams::load(&cfg.paths.surrogate)?;
    let traces = load_traces(&cfg.paths.traces)?;
    let stats = sigma(cfg, &traces)?;
    let flip = optimization_set(cfg, &traces)?;
    let s = optimize_mask(&surrogate, &flip, cfg.steering.target, &stats, &cfg.optimize_config())?;
    let mut mask = prune_mask(&s, cfg.steering.tau, cfg.steering.lambda, Some(&stats))?;
    mask.alpha_recommended = Some(cfg.steering.alpha);
    let out = &cfg.paths.mask;
    ensure_parent(out)?;
    mask.save(out)?;
    write_manifest(
        "optimize",
        cfg,
        &[&cfg.paths.surrogate, &cfg.paths.traces],
        out,
        json!({
            "optimized_on": flip.len(),
            "final_loss": s.final_loss(),
            "l1": s.l1_norm(),
            "nnz": mask.nnz(),
        }),
    )
}

pub fn apply(cfg: &RunConfig) -> Result<(), CliError> {
    let model = ToyMoEModel::load(&cfg.paths.model)?;
    let mask = SteeringMask::load(&cfg.paths.mask)?;
    let spec = planted_circuit(&model)?;
    let prompts = flip_prompts(cfg, &spec);
    let task = held_out_task(cfg, &spec);
    let alpha = cfg.steering.alpha;
    let payload = build_injection_payload(&mask, alpha)?;
    let target = Behavior::from_label(cfg.steering.target).expect("validated target").output_token();
    let th = cfg.eval.degeneracy_threshold;
    let baseline = behavior_eval(&model, &prompts, target, None, th)?;
    let steered = behavior_eval(&model, &prompts, target, Some(&payload), th)?;
    let utility = utility_eval(&model, &task, Some(&payload))?;
    let report = json!({
        "alpha": alpha,
        "target_token": target,
        "prompts": prompts.len(),
        "baseline": baseline,
        "steered": steered,
        "utility": utility,
    });
    let out = &cfg.paths.apply_report;
    write_text(out, &serde_json::to_string_pretty(&report)?)?;
    write_manifest(
        "apply",
        cfg,
        &[&cfg.paths.model, &cfg.paths.mask],
        out,
        json!({ "success": steered.success_rate, "baseline": baseline.success_rate }),
    )
}

pub fn sweep(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let model = ToyMoEModel::load(&cfg.paths.model)?;
    let surrogate = SurrogateParams::load(&cfg.paths.surrogate)?;
    let traces = load_traces(&cfg.paths.traces)?;
    let spec = planted_circuit(&model)?;
    let stats = sigma(cfg, &traces)?;
    let flip = optimization_set(cfg, &traces)?;
    let prompts = flip_prompts(cfg, &spec);
    let task = held_out_task(cfg, &spec);
    let ctx = SweepContext {
        model: &model,
        surrogate: &surrogate,
        optimize_set: &flip,
        stats: &stats,
        target: cfg.steering.target,
        target_token: Behavior::from_label(cfg.steering.target).expect("validated target").output_token(),
        flip_prompts: &prompts,
        utility_task: &task,
        optimize: cfg.optimize_config(),
        degeneracy_threshold: cfg.eval.degeneracy_threshold,
    };
    let result = run_sweep(&ctx, &cfg.grid(), jobs)?;
    let out = &cfg.paths.sweep_csv;
    write_text(out, &result.to_csv())?;
    let failed: Vec<Value> = result
        .cells
        .iter()
        .filter_map(|c| c.error.as_ref().map(|e| json!({ "lambda": c.lambda, "alpha": c.alpha, "tau": c.tau, "error": e })))
        .collect();
    write_manifest(
        "sweep",
        cfg,
        &[&cfg.paths.model, &cfg.paths.surrogate, &cfg.paths.traces],
        out,
        json!({
            "baseline_success": result.baseline_success,
            "utility_before": result.utility_before,
            "tuned": result.tuned.map(|(lambda, alpha)| json!({ "lambda": lambda, "alpha": alpha })),
            "failed_cells": failed,
        }),
    )
}

pub fn analyze(cfg: &RunConfig) -> Result<(), CliError> {
    let model = ToyMoEModel::load(&cfg.paths.model)?;
    let mask = SteeringMask::load(&cfg.paths.mask)?;
    let spec = planted_circuit(&model)?;
    let prompts = flip_prompts(cfg, &spec);
    let task = held_out_task(cfg, &spec);
    let payload = build_injection_payload(&mask, cfg.steering.alpha)?;
    let before = selection_frequency(&model, &prompts, None)?;
    let after = selection_frequency(&model, &prompts, Some(&payload))?;
    let delta = frequency_delta(&before, &after)?;
    let utility = utility_eval(&model, &task, Some(&payload))?;

    let heatmap = &cfg.paths.heatmap_csv;
    write_text(heatmap, &delta_csv(&delta))?;
    let rows = |a: &moesteer::Array| (0..a.rows()).map(|r| a.row_slice(r).to_vec()).collect::<Vec<_>>();
    let report = json!({
        "alpha": cfg.steering.alpha,
        "utility": utility,
        "tokens": before.tokens,
        "frequency_before": rows(&before.freq),
        "frequency_after": rows(&after.freq),
        "delta": rows(&delta),
    });
    let out = &cfg.paths.utility_report;
    write_text(out, &serde_json::to_string_pretty(&report)?)?;
    let inputs: [&Path; 2] = [&cfg.paths.model, &cfg.paths.mask];
    write_manifest("analyze", cfg, &inputs, heatmap, json!({ "tokens": before.tokens }))?;
    write_manifest("analyze", cfg, &inputs, out, json!({ "decline": utility.decline }))
}
