// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient trainer for the toy MoE.
//!
//! Routing gradients flow through the softmax weights of the selected
//! experts only; the selection itself is treated as constant.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::config::MoEConfig;
use crate::moe::model::{Binder, ToyMoEModel};
use crate::numerics::{adam_step, seeded_rng, AdamConfig, AdamState, Array, ParamGrad, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: MoEConfig,
    pub epochs: usize,
    pub lr: f64,
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Random initialization: uniform `±1/√fan_in` weights, zero biases,
/// unit-scale embeddings and a mixer weight of 0.5.
pub fn init_model(config: &MoEConfig) -> Result<ToyMoEModel> {
    config.validate()?;
    let mut model = ToyMoEModel::zeros(config.clone());
    let mut rng = seeded_rng(config.seed);
    let mut fill = |a: &mut Array, bound: f64| {
        for v in a.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    };
    let d = config.hidden_dim as f64;
    let f = config.expert_hidden_dim as f64;
    fill(&mut model.embedding, 1.0);
    for layer in &mut model.layers {
        fill(&mut layer.gate_w, 1.0 / d.sqrt());
        for x in layer.experts.iter_mut().chain(layer.shared.iter_mut()) {
            fill(&mut x.w1, 1.0 / d.sqrt());
            fill(&mut x.w2, 1.0 / f.sqrt());
        }
    }
    fill(&mut model.head_w, 1.0 / d.sqrt());
    model.mix = Array::full(&[1, config.hidden_dim], 0.5);
    Ok(model)
}

/// Cross-entropy of the next-token prediction at the last position of
/// `tokens` against `target`, with gradients for every bound parameter.
pub(crate) fn sample_loss_and_grads(
    model: &ToyMoEModel,
    tokens: &[usize],
    target: usize,
) -> Result<(f64, Vec<Array>)> {
    let mut tape = Tape::new();
    let mut bind = Binder::new(model, true);
    let (y, _) = model.forward_on_tape(&mut tape, &mut bind, tokens, None)?;
    let last = tape.slice_rows(y, tokens.len() - 1, 1)?;
    let loss = tape.softmax_cross_entropy(last, &[target])?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let out = bind
        .vars()
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Some(v) => grads.get(*v),
            None => Array::zeros(model.param(i).shape()),
        })
        .collect();
    Ok((value, out))
}

/// Trains a freshly initialized model on `(tokens, next token)` pairs with
/// per-sample Adam steps.
pub fn train_toy_moe(dataset: &[(Vec<usize>, usize)], config: &TrainConfig) -> Result<(ToyMoEModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let mut model = init_model(&config.model)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut state = AdamState::new(model.named_params().into_iter().map(|(_, a)| a));
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = seeded_rng(config.model.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (tokens, target) = &dataset[i];
            if *target >= config.model.vocab_size {
                return Err(Error::Input(format!("target token {target} outside vocabulary")));
            }
            let (loss, grads) = sample_loss_and_grads(&model, tokens, *target)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            total += loss;
            let mut params: Vec<ParamGrad<'_>> = model
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(&names)
                .map(|((value, grad), name)| ParamGrad {
                    name: name.as_str(),
                    value,
                    grad,
                })
                .collect();
            adam_step(&mut params, &mut state, &adam)?;
        }
        let mean = total / dataset.len() as f64;
        tracing::debug!(epoch, loss = mean, "toy moe epoch");
        report.epoch_loss.push(mean);
    }
    Ok((model, report))
}
