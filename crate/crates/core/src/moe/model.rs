// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layered MoE network with per-layer gates and hooks.
//!
//! Each token is embedded, mixed with a causal running maximum of the
//! earlier embeddings (the model's only cross-token interaction), then
//! passed through `L` residual MoE layers and a linear output head.

use std::path::Path;

use serde_json::Value;

use crate::container::{self, atomic_write, read_file};
use crate::error::{Error, Result};
use crate::moe::config::MoEConfig;
use crate::moe::hook::{Capture, GateHook, InjectionPayload};
use crate::moe::routing::top_k_select;
use crate::numerics::{Array, Tape, Var};

pub const MODEL_MAGIC: &[u8; 8] = b"MASCMOD1";

/// Two-layer feed-forward expert: `relu(h·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl Expert {
    pub fn zeros(hidden: usize, width: usize) -> Self {
        Self {
            w1: Array::zeros(&[hidden, width]),
            b1: Array::zeros(&[1, width]),
            w2: Array::zeros(&[width, hidden]),
            b2: Array::zeros(&[1, hidden]),
        }
    }

    fn parts(&self) -> [&Array; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn parts_mut(&mut self) -> [&mut Array; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    /// `hidden × E`.
    pub gate_w: Array,
    /// `1 × E`.
    pub gate_b: Array,
    pub experts: Vec<Expert>,
    pub shared: Vec<Expert>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMoEModel {
    pub config: MoEConfig,
    /// `vocab × hidden`.
    pub embedding: Array,
    /// `1 × hidden` weights on the causal running maximum.
    pub mix: Array,
    pub layers: Vec<MoELayer>,
    /// `hidden × vocab`.
    pub head_w: Array,
    /// `1 × vocab`.
    pub head_b: Array,
    /// Free-form description stored in checkpoints (e.g. fixture layout).
    pub meta: Value,
}

/// Result of [`ToyMoEModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `T × vocab`.
    pub logits: Array,
    pub capture: Option<Capture>,
}

impl ForwardOutput {
    /// Greedy token at every position.
    pub fn argmax_tokens(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }

    /// Greedy token at the last position.
    pub fn last_token(&self) -> usize {
        *self.argmax_tokens().last().expect("non-empty sequence")
    }
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(a: &Array) -> Vec<usize> {
    (0..a.rows())
        .map(|r| {
            let row = a.row_slice(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Lazily moves parameters onto a tape, as constants or as trainable leaves.
pub(crate) struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    pub(crate) fn new(model: &ToyMoEModel, trainable: bool) -> Self {
        Self {
            vars: vec![None; model.param_count()],
            trainable,
        }
    }

    fn get(&mut self, tape: &mut Tape, model: &ToyMoEModel, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let a = model.param(idx).clone();
        let v = if self.trainable {
            tape.param(a)
        } else {
            tape.constant(a)
        };
        self.vars[idx] = Some(v);
        v
    }

    /// Bound variable of each parameter slot (`None` if unused).
    pub(crate) fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

/// Per-layer routing record produced while building the forward graph.
struct LayerRecord {
    raw: Array,
    post: Option<Array>,
    selected: Vec<usize>,
    weights: Vec<f64>,
}

impl ToyMoEModel {
    /// Checks every parameter shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, e, f, v) = (c.hidden_dim, c.experts_per_layer, c.expert_hidden_dim, c.vocab_size);
        let want = |name: &str, a: &Array, shape: &[usize]| -> Result<()> {
            if a.shape() != shape {
                return Err(Error::shape(
                    "ToyMoEModel",
                    format!("{name} is {:?}, expected {shape:?}", a.shape()),
                ));
            }
            Ok(())
        };
        want("embedding", &self.embedding, &[v, d])?;
        want("mix", &self.mix, &[1, d])?;
        want("head_w", &self.head_w, &[d, v])?;
        want("head_b", &self.head_b, &[1, v])?;
        if self.layers.len() != c.num_layers {
            return Err(Error::Contract(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            want(&format!("layer{l}.gate_w"), &layer.gate_w, &[d, e])?;
            want(&format!("layer{l}.gate_b"), &layer.gate_b, &[1, e])?;
            if layer.experts.len() != e || layer.shared.len() != c.num_shared_experts {
                return Err(Error::Contract(format!("layer {l}: wrong expert count")));
            }
            for x in layer.experts.iter().chain(&layer.shared) {
                want("expert.w1", &x.w1, &[d, f])?;
                want("expert.b1", &x.b1, &[1, f])?;
                want("expert.w2", &x.w2, &[f, d])?;
                want("expert.b2", &x.b2, &[1, d])?;
            }
        }
        Ok(())
    }

    fn per_layer_params(&self) -> usize {
        2 + 4 * (self.config.experts_per_layer + self.config.num_shared_experts)
    }

    /// Total number of parameter arrays.
    pub fn param_count(&self) -> usize {
        4 + self.config.num_layers * self.per_layer_params()
    }

    fn gate_slot(&self, l: usize) -> usize {
        2 + l * self.per_layer_params()
    }

    fn expert_slot(&self, l: usize, e: usize) -> usize {
        self.gate_slot(l) + 2 + 4 * e
    }

    fn shared_slot(&self, l: usize, s: usize) -> usize {
        self.expert_slot(l, self.config.experts_per_layer + s)
    }

    fn head_slot(&self) -> usize {
        2 + self.config.num_layers * self.per_layer_params()
    }

    /// Parameter array at a flat slot (checkpoint order).
    pub fn param(&self, idx: usize) -> &Array {
        match idx {
            0 => &self.embedding,
            1 => &self.mix,
            _ if idx >= self.head_slot() => {
                if idx == self.head_slot() {
                    &self.head_w
                } else {
                    &self.head_b
                }
            }
            _ => {
                let off = idx - 2;
                let layer = &self.layers[off / self.per_layer_params()];
                match off % self.per_layer_params() {
                    0 => &layer.gate_w,
                    1 => &layer.gate_b,
                    r => {
                        let (x, p) = ((r - 2) / 4, (r - 2) % 4);
                        let n = self.config.experts_per_layer;
                        let ex = if x < n { &layer.experts[x] } else { &layer.shared[x - n] };
                        ex.parts()[p]
                    }
                }
            }
        }
    }

    /// All parameters with checkpoint names, in slot order.
    pub fn named_params(&self) -> Vec<(String, &Array)> {
        let mut out = vec![("embedding".to_string(), &self.embedding), ("mix".to_string(), &self.mix)];
        const PARTS: [&str; 4] = ["w1", "b1", "w2", "b2"];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.gate_w"), &layer.gate_w));
            out.push((format!("layer{l}.gate_b"), &layer.gate_b));
            for (e, x) in layer.experts.iter().enumerate() {
                for (p, a) in PARTS.iter().zip(x.parts()) {
                    out.push((format!("layer{l}.expert{e}.{p}"), a));
                }
            }
            for (s, x) in layer.shared.iter().enumerate() {
                for (p, a) in PARTS.iter().zip(x.parts()) {
                    out.push((format!("layer{l}.shared{s}.{p}"), a));
                }
            }
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    /// Mutable parameters in slot order.
    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut out: Vec<&mut Array> = vec![&mut self.embedding, &mut self.mix];
        for layer in &mut self.layers {
            out.push(&mut layer.gate_w);
            out.push(&mut layer.gate_b);
            for x in layer.experts.iter_mut().chain(layer.shared.iter_mut()) {
                out.extend(x.parts_mut());
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Raw gate logits of one hidden state at `layer`.
    pub fn gate_logits(&self, hidden: &Array, layer: usize) -> Result<Array> {
        if layer >= self.config.num_layers {
            return Err(Error::Contract(format!(
                "layer {layer} out of range (model has {})",
                self.config.num_layers
            )));
        }
        if hidden.len() != self.config.hidden_dim {
            return Err(Error::shape(
                "gate_logits",
                format!("hidden state of {} values, expected {}", hidden.len(), self.config.hidden_dim),
            ));
        }
        if !hidden.is_finite() {
            return Err(Error::NonFinite(format!("hidden state entering gate {layer}")));
        }
        let h = hidden.clone().reshape(&[1, self.config.hidden_dim])?;
        let g = crate::numerics::matmul(&h, &self.layers[layer].gate_w)?;
        let out = g.zip_map(&self.layers[layer].gate_b, |a, b| a + b)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("gate {layer} logits")));
        }
        out.reshape(&[self.config.experts_per_layer])
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_hook(&self, hook: Option<&GateHook>) -> Result<Option<InjectionPayload>> {
        let Some(p) = hook.and_then(GateHook::active_payload) else {
            return Ok(None);
        };
        let c = &self.config;
        p.validate(c.num_layers, c.experts_per_layer, c.top_k)?;
        Ok(Some(p.clone()))
    }

    fn expert_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        slot: usize,
        h: Var,
    ) -> Result<Var> {
        let w1 = bind.get(tape, self, slot);
        let b1 = bind.get(tape, self, slot + 1);
        let w2 = bind.get(tape, self, slot + 2);
        let b2 = bind.get(tape, self, slot + 3);
        let z = tape.matmul(h, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.relu(z);
        let o = tape.matmul(z, w2)?;
        tape.add_row(o, b2)
    }

    /// MoE block output (without residual) for hidden states `h` (`T × d`).
    fn layer_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        l: usize,
        h: Var,
        payload: Option<&InjectionPayload>,
    ) -> Result<(Var, LayerRecord)> {
        let c = &self.config;
        let (t_len, e_n, k) = (tape.shape(h).0, c.experts_per_layer, c.top_k);
        if !tape.value(h).is_finite() {
            return Err(Error::NonFinite(format!("hidden state entering gate {l}")));
        }
        let gw = bind.get(tape, self, self.gate_slot(l));
        let gb = bind.get(tape, self, self.gate_slot(l) + 1);
        let g = tape.matmul(h, gw)?;
        let g = tape.add_row(g, gb)?;
        let raw = tape.value(g).clone();
        if !raw.is_finite() {
            return Err(Error::NonFinite(format!("gate {l} logits")));
        }

        let (routed, post) = match payload {
            None => (g, None),
            Some(p @ InjectionPayload::Additive { .. }) => {
                let mut delta = vec![0.0; e_n];
                p.apply(l, &mut delta);
                let d = tape.constant(Array::row(delta));
                let g2 = tape.add_row(g, d)?;
                (g2, Some(tape.value(g2).clone()))
            }
            Some(p @ InjectionPayload::Force { .. }) => {
                let mut forced = raw.clone();
                for t in 0..t_len {
                    p.apply(l, forced.row_slice_mut(t));
                }
                let g2 = tape.constant(forced.clone());
                (g2, Some(forced))
            }
        };

        let logits = tape.value(routed).clone();
        let mut wmat = Array::zeros(&[t_len, e_n]);
        let mut selected = Vec::with_capacity(t_len * k);
        let mut weights = Vec::with_capacity(t_len * k);
        let mut used = vec![false; e_n];
        for t in 0..t_len {
            let sel = top_k_select(logits.row_slice(t), k, c.softmax_mode)?;
            for (&e, &w) in sel.indices.iter().zip(&sel.weights) {
                wmat.set(t, e, w);
                used[e] = true;
            }
            selected.extend_from_slice(&sel.indices);
            weights.extend_from_slice(&sel.weights);
        }
        let wvar = tape.selected_softmax(routed, wmat)?;

        let mut out: Option<Var> = None;
        for (e, _) in used.iter().enumerate().filter(|(_, &u)| u) {
            let y = self.expert_on_tape(tape, bind, self.expert_slot(l, e), h)?;
            let col = tape.slice_cols(wvar, e, 1)?;
            let y = tape.mul_col(y, col)?;
            out = Some(match out {
                None => y,
                Some(acc) => tape.add(acc, y)?,
            });
        }
        for s in 0..c.num_shared_experts {
            let y = self.expert_on_tape(tape, bind, self.shared_slot(l, s), h)?;
            out = Some(match out {
                None => y,
                Some(acc) => tape.add(acc, y)?,
            });
        }
        let out = out.expect("top_k >= 1 selects at least one expert");
        Ok((
            out,
            LayerRecord {
                raw,
                post,
                selected,
                weights,
            },
        ))
    }

    /// Builds the whole forward graph; returns the `T × vocab` logit node.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        tokens: &[usize],
        hook: Option<&GateHook>,
    ) -> Result<(Var, Option<Capture>)> {
        self.check_tokens(tokens)?;
        let payload = self.check_hook(hook)?;
        let c = &self.config;
        let emb = bind.get(tape, self, 0);
        let mix = bind.get(tape, self, 1);
        let x = tape.gather_rows(emb, tokens)?;
        let pooled = tape.prefix_max(x);
        let pooled = tape.mul_row(pooled, mix)?;
        let mut h = tape.add(x, pooled)?;

        let mut records = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let (out, rec) = self.layer_on_tape(tape, bind, l, h, payload.as_ref())?;
            h = tape.add(h, out)?;
            records.push(rec);
        }
        let hw = bind.get(tape, self, self.head_slot());
        let hb = bind.get(tape, self, self.head_slot() + 1);
        let y = tape.matmul(h, hw)?;
        let y = tape.add_row(y, hb)?;
        if !tape.value(y).is_finite() {
            return Err(Error::NonFinite("output logits".into()));
        }

        let capture = hook
            .filter(|h| h.mode.captures())
            .map(|_| assemble_capture(&records, tokens.len(), c.experts_per_layer, c.top_k));
        Ok((y, capture))
    }

    /// Runs the model on `tokens`; deterministic in (model, tokens, hook).
    pub fn forward(&self, tokens: &[usize], hook: Option<&GateHook>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(self, false);
        let (y, capture) = self.forward_on_tape(&mut tape, &mut bind, tokens, hook)?;
        Ok(ForwardOutput {
            logits: tape.value(y).clone(),
            capture,
        })
    }

    /// One MoE block applied to hidden states (`T × hidden`), without the
    /// residual connection. Returns the block output and its routing record.
    pub fn layer_forward(
        &self,
        hidden: &Array,
        layer: usize,
        hook: Option<&GateHook>,
    ) -> Result<(Array, Capture)> {
        if layer >= self.config.num_layers {
            return Err(Error::Contract(format!("layer {layer} out of range")));
        }
        if hidden.cols() != self.config.hidden_dim {
            return Err(Error::shape(
                "layer_forward",
                format!("hidden {:?}, model width {}", hidden.shape(), self.config.hidden_dim),
            ));
        }
        let payload = self.check_hook(hook)?;
        let mut tape = Tape::new();
        let mut bind = Binder::new(self, false);
        let h = tape.constant(hidden.clone());
        let (out, rec) = self.layer_on_tape(&mut tape, &mut bind, layer, h, payload.as_ref())?;
        let t = hidden.rows();
        let c = &self.config;
        let cap = Capture {
            pre: rec.raw.reshape(&[t, 1, c.experts_per_layer])?,
            post: rec.post.map(|p| p.reshape(&[t, 1, c.experts_per_layer])).transpose()?,
            selected: rec.selected,
            weights: rec.weights,
            tokens: t,
            layers: 1,
            experts: c.experts_per_layer,
            top_k: c.top_k,
        };
        Ok((tape.value(out).clone(), cap))
    }

    /// Serializes the model into a `MASCMOD1` container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({
            "config": self.config,
            "seed": self.config.seed,
            "model": self.meta,
        });
        let named = self.named_params();
        let blocks: Vec<(&str, &Array)> = named.iter().map(|(n, a)| (n.as_str(), *a)).collect();
        container::encode(MODEL_MAGIC, &meta, &blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(MODEL_MAGIC, bytes)?;
        let config: MoEConfig = serde_json::from_value(c.meta["config"].clone()).map_err(|e| Error::Format {
            offset: 12,
            detail: format!("bad model config: {e}"),
        })?;
        config.validate().map_err(|e| Error::Format {
            offset: 12,
            detail: e.to_string(),
        })?;
        let mut model = Self::zeros(config);
        model.meta = c.meta.get("model").cloned().unwrap_or(Value::Null);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != c.blocks.len() {
            return Err(Error::Format {
                offset: 12,
                detail: format!("{} parameter blocks, expected {}", c.blocks.len(), names.len()),
            });
        }
        for ((name, slot), (got_name, arr)) in names.iter().zip(model.params_mut()).zip(&c.blocks) {
            if name != got_name || slot.shape() != arr.shape() {
                return Err(Error::Format {
                    offset: 12,
                    detail: format!("block `{got_name}` {:?} where `{name}` {:?} expected", arr.shape(), slot.shape()),
                });
            }
            *slot = arr.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// All-zero model of the given geometry.
    pub fn zeros(config: MoEConfig) -> Self {
        let (d, e, f, v) = (
            config.hidden_dim,
            config.experts_per_layer,
            config.expert_hidden_dim,
            config.vocab_size,
        );
        let layers = (0..config.num_layers)
            .map(|_| MoELayer {
                gate_w: Array::zeros(&[d, e]),
                gate_b: Array::zeros(&[1, e]),
                experts: (0..e).map(|_| Expert::zeros(d, f)).collect(),
                shared: (0..config.num_shared_experts).map(|_| Expert::zeros(d, f)).collect(),
            })
            .collect();
        Self {
            embedding: Array::zeros(&[v, d]),
            mix: Array::zeros(&[1, d]),
            layers,
            head_w: Array::zeros(&[d, v]),
            head_b: Array::zeros(&[1, v]),
            meta: Value::Null,
            config,
        }
    }
}

fn assemble_capture(records: &[LayerRecord], t_len: usize, e_n: usize, k: usize) -> Capture {
    let l_n = records.len();
    let mut pre = vec![0.0; t_len * l_n * e_n];
    let has_post = records.iter().any(|r| r.post.is_some());
    let mut post = if has_post { Some(vec![0.0; t_len * l_n * e_n]) } else { None };
    let mut selected = vec![0usize; t_len * l_n * k];
    let mut weights = vec![0.0; t_len * l_n * k];
    for (l, r) in records.iter().enumerate() {
        for t in 0..t_len {
            let dst = (t * l_n + l) * e_n;
            pre[dst..dst + e_n].copy_from_slice(r.raw.row_slice(t));
            if let (Some(p), Some(src)) = (post.as_mut(), r.post.as_ref()) {
                p[dst..dst + e_n].copy_from_slice(src.row_slice(t));
            }
            let sd = (t * l_n + l) * k;
            selected[sd..sd + k].copy_from_slice(&r.selected[t * k..(t + 1) * k]);
            weights[sd..sd + k].copy_from_slice(&r.weights[t * k..(t + 1) * k]);
        }
    }
    let shape = [t_len, l_n, e_n];
    Capture {
        pre: Array::new(shape.to_vec(), pre).expect("sized above"),
        post: post.map(|p| Array::new(shape.to_vec(), p).expect("sized above")),
        selected,
        weights,
        tokens: t_len,
        layers: l_n,
        experts: e_n,
        top_k: k,
    }
}
