// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::{adam_step, seeded_rng, sigmoid, AdamConfig, AdamState, Array, ParamGrad, Tape};
use crate::surrogate::graph::{self, Packing};
use crate::surrogate::{SurrogateConfig, SurrogateParams, PARAM_NAMES};
use crate::traces::{split, RoutingTrace, SplitSpec, TraceDataset};

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Mean BCE over training sequences, per epoch.
    pub train_loss: Vec<f64>,
    /// Validation accuracy after each epoch.
    pub val_accuracy: Vec<f64>,
    pub train_size: usize,
    pub val_size: usize,
}

impl TrainHistory {
    pub fn final_val_accuracy(&self) -> f64 {
        self.val_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Logits for `traces`, in input order.
pub(crate) fn batch_logits(params: &SurrogateParams, traces: &[&RoutingTrace]) -> Result<Vec<f64>> {
    if traces.is_empty() {
        return Ok(Vec::new());
    }
    let packing = Packing::new(&traces.iter().map(|t| t.tokens()).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let b = graph::bind(&mut tape, params, false);
    let x = tape.constant(packing.pack(traces));
    let y = graph::logits(&mut tape, &b, params, x, &packing)?;
    let mut out = vec![0.0; traces.len()];
    for (j, &i) in packing.order.iter().enumerate() {
        out[i] = tape.value(y).data()[j];
    }
    Ok(out)
}

/// Probability of label 1 for every trace of `dataset`.
pub fn predict_proba(params: &SurrogateParams, dataset: &TraceDataset) -> Result<Vec<f64>> {
    let refs: Vec<&RoutingTrace> = dataset.traces().iter().collect();
    Ok(batch_logits(params, &refs)?.into_iter().map(sigmoid).collect())
}

/// Fraction of traces whose thresholded prediction matches the label.
pub fn evaluate_accuracy(params: &SurrogateParams, dataset: &TraceDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let p = predict_proba(params, dataset)?;
    let hits = p
        .iter()
        .zip(dataset.traces())
        .filter(|(p, t)| (**p > 0.5) == (t.label() == 1))
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Mean BCE of a batch and its parameter gradients, in
/// [`PARAM_NAMES`](crate::surrogate::PARAM_NAMES) order.
pub fn batch_loss_and_grads(params: &SurrogateParams, traces: &[&RoutingTrace]) -> Result<(f64, Vec<Array>)> {
    let packing = Packing::new(&traces.iter().map(|t| t.tokens()).collect::<Vec<_>>());
    let targets: Vec<f64> = packing.order.iter().map(|&i| f64::from(traces[i].label())).collect();
    let mut tape = Tape::new();
    let b = graph::bind(&mut tape, params, true);
    let x = tape.constant(packing.pack(traces));
    let y = graph::logits(&mut tape, &b, params, x, &packing)?;
    let loss = tape.bce_with_logits(y, &targets)?;
    let value = tape.scalar(loss);
    let g = tape.backward(loss)?;
    Ok((value, b.leaves.iter().map(|&v| g.get(v)).collect()))
}

/// Trains a surrogate on a stratified split of `dataset` for a fixed
/// number of epochs. Batches are length-sorted buckets visited in random
/// order.
pub fn train_surrogate(dataset: &TraceDataset, config: &SurrogateConfig) -> Result<(SurrogateParams, TrainHistory)> {
    config.validate()?;
    let (train, val) = split(
        dataset,
        &SplitSpec {
            train_fraction: config.train_fraction,
            seed: config.seed,
        },
    )?;
    let mut params = SurrogateParams::init(
        dataset.layers(),
        dataset.experts(),
        config.embed_dim,
        config.hidden_dim,
        config.seed,
    );
    let mut state = AdamState::new(params.arrays());
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut history = TrainHistory {
        train_size: train.len(),
        val_size: val.len(),
        ..TrainHistory::default()
    };

    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        idx.shuffle(&mut rng);
        idx.sort_by_key(|&i| std::cmp::Reverse(train.traces()[i].tokens()));
        let mut batches: Vec<&[usize]> = idx.chunks(config.batch_size).collect();
        batches.shuffle(&mut rng);

        let mut total = 0.0;
        for batch in batches {
            let refs: Vec<&RoutingTrace> = batch.iter().map(|&i| &train.traces()[i]).collect();
            let (loss, grads) = batch_loss_and_grads(&params, &refs)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            total += loss * refs.len() as f64;
            let mut pg: Vec<ParamGrad<'_>> = params
                .arrays_mut()
                .into_iter()
                .zip(&grads)
                .zip(PARAM_NAMES)
                .map(|((value, grad), name)| ParamGrad { name, value, grad })
                .collect();
            adam_step(&mut pg, &mut state, &adam)?;
        }
        let loss = total / train.len() as f64;
        let acc = evaluate_accuracy(&params, &val)?;
        tracing::info!(epoch, loss, val_accuracy = acc, "surrogate epoch");
        history.train_loss.push(loss);
        history.val_accuracy.push(acc);
    }
    Ok((params, history))
}

/// Gradient of `BCE(ŷ, target)` with respect to the raw logits of `trace`
/// (`T × L × E`), through the per-layer standardization.
pub fn input_gradient(params: &SurrogateParams, trace: &RoutingTrace, target: u8) -> Result<Array> {
    params.check_trace(trace)?;
    let packing = Packing::new(&[trace.tokens()]);
    let mut tape = Tape::new();
    let b = graph::bind(&mut tape, params, false);
    let x = tape.param(packing.pack(&[trace]));
    let y = graph::logits(&mut tape, &b, params, x, &packing)?;
    let loss = tape.bce_with_logits(y, &[f64::from(target)])?;
    let g = tape.backward(loss)?;
    packing.unpack(&g.get(x), &[trace]).pop().expect("one trace")
        .reshape(trace.logits().shape())
}
