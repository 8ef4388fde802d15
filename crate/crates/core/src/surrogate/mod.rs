// SPDX-License-Identifier: MIT OR Apache-2.0

//! LSTM behavior surrogate over routing-logit sequences.
//!
//! Per token, each layer's `E` gate logits are standardized across experts,
//! projected to `D` dimensions by a projection shared by all layers, and the
//! `L` projections are concatenated. A single-layer LSTM reads the token
//! sequence and a linear head maps the last hidden state to a behavior logit.
//!
//! The plain functions in this module evaluate one trace directly; training
//! and gradients go through the tape graph in [`graph`].

mod checkpoint;
pub(crate) mod graph;
mod train;

pub use checkpoint::SURROGATE_MAGIC;
pub use train::{batch_loss_and_grads, evaluate_accuracy, input_gradient, predict_proba, train_surrogate, TrainHistory};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bce_term, seeded_rng, sigmoid, tape::standardize_into, Array};
use crate::traces::RoutingTrace;

/// Variance guard of the per-layer standardization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SurrogateConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 64,
            epochs: 15,
            lr: 0.01,
            batch_size: 64,
            train_fraction: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract(
                "embed_dim, hidden_dim, epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Learnable surrogate parameters.
///
/// Gate blocks of the LSTM matrices are ordered input, forget, cell, output;
/// matrices are stored input-major (`x · w_ih`).
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub layers: usize,
    pub experts: usize,
    /// `D × E`.
    pub proj_w: Array,
    /// `1 × D`.
    pub proj_b: Array,
    /// `L·D × 4H`.
    pub w_ih: Array,
    /// `H × 4H`.
    pub w_hh: Array,
    /// `1 × 4H`.
    pub bias: Array,
    /// `1 × H`.
    pub head_w: Array,
    /// `1 × 1`.
    pub head_b: Array,
    pub seed: u64,
}

pub const PARAM_NAMES: [&str; 7] = ["proj_w", "proj_b", "w_ih", "w_hh", "bias", "head_w", "head_b"];

impl SurrogateParams {
    /// Uniform `±1/√fan_in` initialization.
    pub fn init(layers: usize, experts: usize, embed: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut uni = |shape: &[usize], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-b..=b)).collect()).expect("sized")
        };
        let ld = layers * embed;
        Self {
            layers,
            experts,
            proj_w: uni(&[embed, experts], experts),
            proj_b: uni(&[1, embed], experts),
            w_ih: uni(&[ld, 4 * hidden], hidden),
            w_hh: uni(&[hidden, 4 * hidden], hidden),
            bias: uni(&[1, 4 * hidden], hidden),
            head_w: uni(&[1, hidden], hidden),
            head_b: uni(&[1, 1], hidden),
            seed,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_w.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn arrays(&self) -> [&Array; 7] {
        [
            &self.proj_w,
            &self.proj_b,
            &self.w_ih,
            &self.w_hh,
            &self.bias,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Array; 7] {
        [
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.bias,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.embed_dim(), self.hidden_dim());
        let want: [&[usize]; 7] = [
            &[d, self.experts],
            &[1, d],
            &[self.layers * d, 4 * h],
            &[h, 4 * h],
            &[1, 4 * h],
            &[1, h],
            &[1, 1],
        ];
        for ((name, a), shape) in PARAM_NAMES.iter().zip(self.arrays()).zip(want) {
            if a.shape() != shape {
                return Err(Error::shape(
                    "SurrogateParams",
                    format!("{name} is {:?}, expected {shape:?}", a.shape()),
                ));
            }
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("surrogate parameter {name}")));
            }
        }
        Ok(())
    }

    fn check_trace(&self, trace: &RoutingTrace) -> Result<()> {
        if trace.layers() != self.layers || trace.experts() != self.experts {
            return Err(Error::shape(
                "surrogate",
                format!(
                    "trace is {}x{}, surrogate expects {}x{}",
                    trace.layers(),
                    trace.experts(),
                    self.layers,
                    self.experts
                ),
            ));
        }
        Ok(())
    }
}

/// Standardizes `x` across its entries (population variance, `NORM_EPS`
/// inside the root, no affine).
pub fn normalize_layer(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if !x.is_empty() {
        standardize_into(x, &mut out, NORM_EPS);
    }
    out
}

/// `W_p · x + b_p`.
pub fn project(params: &SurrogateParams, x_norm: &[f64]) -> Result<Vec<f64>> {
    if x_norm.len() != params.experts {
        return Err(Error::shape(
            "project",
            format!("input of {} values, projection expects {}", x_norm.len(), params.experts),
        ));
    }
    Ok((0..params.embed_dim())
        .map(|i| {
            params.proj_b.data()[i]
                + params
                    .proj_w
                    .row_slice(i)
                    .iter()
                    .zip(x_norm)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
        .collect())
}

/// Concatenates per-layer vectors in layer order.
pub fn flatten_token(per_layer: &[Vec<f64>]) -> Vec<f64> {
    per_layer.concat()
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_step(params: &SurrogateParams, z: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = params.hidden_dim();
    if z.len() != params.w_ih.rows() || h.len() != hd || c.len() != hd {
        return Err(Error::shape(
            "lstm_step",
            format!("z {}, h {}, c {} for hidden size {hd}", z.len(), h.len(), c.len()),
        ));
    }
    let mut pre = params.bias.data().to_vec();
    for (zi, row) in z.iter().zip(0..) {
        for (p, w) in pre.iter_mut().zip(params.w_ih.row_slice(row)) {
            *p += zi * w;
        }
    }
    for (hi, row) in h.iter().zip(0..) {
        for (p, w) in pre.iter_mut().zip(params.w_hh.row_slice(row)) {
            *p += hi * w;
        }
    }
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(pre[j]);
        let f = sigmoid(pre[hd + j]);
        let g = pre[2 * hd + j].tanh();
        let o = sigmoid(pre[3 * hd + j]);
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    Ok((h2, c2))
}

/// `W_c · h + b_c`.
pub fn classify(params: &SurrogateParams, h: &[f64]) -> Result<f64> {
    if h.len() != params.hidden_dim() {
        return Err(Error::shape("classify", format!("{} values, hidden size {}", h.len(), params.hidden_dim())));
    }
    Ok(params.head_b.data()[0] + params.head_w.data().iter().zip(h).map(|(w, x)| w * x).sum::<f64>())
}

/// Surrogate input of token `t`: normalized, projected, concatenated layers.
pub fn embed_token(params: &SurrogateParams, trace: &RoutingTrace, t: usize) -> Result<Vec<f64>> {
    let per_layer = (0..params.layers)
        .map(|l| project(params, &normalize_layer(trace.at(t, l))))
        .collect::<Result<Vec<_>>>()?;
    Ok(flatten_token(&per_layer))
}

/// Behavior logit of one trace, read from the state after its last token.
pub fn forward_trace(params: &SurrogateParams, trace: &RoutingTrace) -> Result<f64> {
    params.check_trace(trace)?;
    let hd = params.hidden_dim();
    let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
    for t in 0..trace.tokens() {
        let z = embed_token(params, trace, t)?;
        (h, c) = lstm_step(params, &z, &h, &c)?;
    }
    classify(params, &h)
}

/// Binary cross-entropy with logits, overflow-free.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    bce_term(logit, target)
}

/// Mean of [`bce_with_logits`] over a batch of sequences.
pub fn mean_bce(logits: &[f64], targets: &[f64]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits.iter().zip(targets).map(|(&x, &y)| bce_term(x, y)).sum::<f64>() / n
}
