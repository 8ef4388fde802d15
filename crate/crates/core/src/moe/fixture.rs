// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-circuit fixture: a hand-constructed MoE whose behavior is
//! carried by known expert sets.
//!
//! Vocabulary: `JUNK, FLAG_A, FLAG_B, QUERY, OUT_A, OUT_B`, then `n`
//! content tokens. A behavior prompt is `[flag, c1 .. cm, QUERY]`; at the
//! query position the model answers `OUT_A` or `OUT_B` depending on which
//! expert set won the routing. At every content position a utility expert
//! predicts the content token's successor `(c + 1) mod n`, which doubles as
//! the held-out utility task and keeps healthy outputs non-repetitive.
//!
//! Hidden layout (width `6 + 2n`):
//!
//! ```text
//! 0 flag A   1 flag B   2 query   3 content-on   4 A-evidence   5 B-evidence
//! 6 .. 6+n   content one-hot     6+n .. 6+2n   answer one-hot
//! ```
//!
//! Flag dimensions are carried forward by the running-maximum mixer, so
//! every position after a flag knows which behavior was requested.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::config::{MoEConfig, SoftmaxMode};
use crate::moe::model::{Expert, ToyMoEModel};
use crate::numerics::{seeded_rng, Array};

pub const JUNK: usize = 0;
pub const FLAG_A: usize = 1;
pub const FLAG_B: usize = 2;
pub const QUERY: usize = 3;
pub const OUT_A: usize = 4;
pub const OUT_B: usize = 5;
pub const FIRST_CONTENT: usize = 6;

const DIM_FLAG_A: usize = 0;
const DIM_FLAG_B: usize = 1;
const DIM_QUERY: usize = 2;
const DIM_CONTENT_ON: usize = 3;
const DIM_EVIDENCE_A: usize = 4;
const DIM_EVIDENCE_B: usize = 5;
const FIRST_CONTENT_DIM: usize = 6;

/// Expert roles and gains of a planted circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitSpec {
    /// Experts carrying behavior A, per layer.
    pub a_sets: Vec<Vec<usize>>,
    /// Experts carrying behavior B, per layer.
    pub b_sets: Vec<Vec<usize>>,
    /// Experts solving the utility task, per layer.
    pub u_sets: Vec<Vec<usize>>,
    /// Number of content tokens.
    pub content_tokens: usize,
    /// Logit gap between the requested and the other behavior set.
    pub margin: f64,
    /// Extra gate logit of both behavior sets at the query position.
    pub query_gain: f64,
    /// Gate logit of utility experts at content positions.
    pub utility_gain: f64,
    /// Standard deviation of random gate weights on content dimensions.
    pub gate_noise: f64,
    pub behavior_gain: f64,
    /// Constant evidence a behavior expert writes wherever it is selected.
    pub behavior_leak: f64,
    pub answer_gain: f64,
    /// Head bias of the junk token; answers must outscore it.
    pub junk_bias: f64,
    /// Running-maximum weight on content dimensions.
    pub content_pool: f64,
}

impl CircuitSpec {
    /// Behavior and utility sets that rotate by three experts per layer:
    /// A = `{r .. r+k}`, B = `{r+k .. r+2k}` and U = every other expert
    /// (indices mod E).
    pub fn rotating(layers: usize, experts: usize, k: usize) -> Result<Self> {
        if experts < 2 * k + 1 {
            return Err(Error::Spec(format!(
                "rotating circuit needs at least 2k+1 = {} experts, got {experts}",
                2 * k + 1
            )));
        }
        let set = |r: usize, from: usize, n: usize| (from..from + n).map(|i| (r + i) % experts).collect::<Vec<_>>();
        let rot = |l: usize| (3 * l) % experts;
        Ok(Self {
            a_sets: (0..layers).map(|l| set(rot(l), 0, k)).collect(),
            b_sets: (0..layers).map(|l| set(rot(l), k, k)).collect(),
            u_sets: (0..layers).map(|l| set(rot(l), 2 * k, experts - 2 * k)).collect(),
            content_tokens: 16,
            margin: 1.0,
            query_gain: 3.0,
            utility_gain: 5.0,
            gate_noise: 1.5,
            behavior_gain: 1.0,
            behavior_leak: 0.5,
            answer_gain: 1.0,
            junk_bias: 1.6,
            content_pool: 0.25,
        })
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_CONTENT + self.content_tokens
    }

    pub fn hidden_dim(&self) -> usize {
        FIRST_CONTENT_DIM + 2 * self.content_tokens
    }

    /// Model geometry matching this circuit.
    pub fn model_config(&self, experts: usize, top_k: usize, seed: u64) -> MoEConfig {
        MoEConfig {
            num_layers: self.a_sets.len(),
            experts_per_layer: experts,
            top_k,
            hidden_dim: self.hidden_dim(),
            expert_hidden_dim: self.content_tokens,
            num_shared_experts: 0,
            vocab_size: self.vocab_size(),
            softmax_mode: SoftmaxMode::default(),
            seed,
        }
    }

    /// Successor of content index `c` in the utility task.
    pub fn successor(&self, c: usize) -> usize {
        (c + 1) % self.content_tokens
    }

    fn validate(&self, config: &MoEConfig) -> Result<()> {
        config.validate()?;
        let l_n = config.num_layers;
        let e_n = config.experts_per_layer;
        if self.a_sets.len() != l_n || self.b_sets.len() != l_n || self.u_sets.len() != l_n {
            return Err(Error::Spec(format!("expert sets must cover all {l_n} layers")));
        }
        if self.content_tokens == 0 {
            return Err(Error::Spec("at least one content token is required".into()));
        }
        if config.vocab_size != self.vocab_size() || config.hidden_dim != self.hidden_dim() {
            return Err(Error::Spec(format!(
                "model geometry (vocab {}, hidden {}) does not match circuit (vocab {}, hidden {})",
                config.vocab_size,
                config.hidden_dim,
                self.vocab_size(),
                self.hidden_dim()
            )));
        }
        if config.expert_hidden_dim < self.content_tokens {
            return Err(Error::Spec("expert width must cover the content tokens".into()));
        }
        for l in 0..l_n {
            let (a, b, u) = (&self.a_sets[l], &self.b_sets[l], &self.u_sets[l]);
            if a.is_empty() || b.is_empty() {
                return Err(Error::Spec(format!("layer {l}: behavior sets must be non-empty")));
            }
            if let Some(e) = a.iter().chain(b).chain(u).find(|&&e| e >= e_n) {
                return Err(Error::Spec(format!("layer {l}: expert {e} out of range")));
            }
            if let Some(e) = a.iter().find(|e| b.contains(e)) {
                return Err(Error::Spec(format!("layer {l}: expert {e} is in both A and B")));
            }
            if let Some(e) = u.iter().find(|e| a.contains(e) || b.contains(e)) {
                return Err(Error::Spec(format!("layer {l}: utility expert {e} overlaps a behavior set")));
            }
        }
        Ok(())
    }
}

/// Builds the planted model; the only randomness is the gate noise, drawn
/// from `config.seed`.
pub fn build_planted_fixture(config: &MoEConfig, spec: &CircuitSpec) -> Result<ToyMoEModel> {
    spec.validate(config)?;
    let n = spec.content_tokens;
    let (d, e_n, f) = (config.hidden_dim, config.experts_per_layer, config.expert_hidden_dim);
    let answer_dim = |c: usize| FIRST_CONTENT_DIM + n + c;
    let mut model = ToyMoEModel::zeros(config.clone());

    model.embedding.set(FLAG_A, DIM_FLAG_A, 1.0);
    model.embedding.set(FLAG_B, DIM_FLAG_B, 1.0);
    model.embedding.set(QUERY, DIM_QUERY, 1.0);
    for c in 0..n {
        model.embedding.set(FIRST_CONTENT + c, DIM_CONTENT_ON, 1.0);
        model.embedding.set(FIRST_CONTENT + c, FIRST_CONTENT_DIM + c, 1.0);
    }
    model.mix.set(0, DIM_FLAG_A, 1.0);
    model.mix.set(0, DIM_FLAG_B, 1.0);
    for c in 0..n {
        model.mix.set(0, FIRST_CONTENT_DIM + c, spec.content_pool);
    }

    let mut rng = seeded_rng(config.seed);
    let noise = Normal::new(0.0, spec.gate_noise.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let half = spec.margin / 2.0;
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let mut gw = Array::zeros(&[d, e_n]);
        for c in 0..n {
            for e in 0..e_n {
                gw.set(FIRST_CONTENT_DIM + c, e, noise.sample(&mut rng));
            }
        }
        for &e in &spec.a_sets[l] {
            gw.set(DIM_FLAG_A, e, half);
            gw.set(DIM_FLAG_B, e, -half);
            gw.set(DIM_QUERY, e, spec.query_gain);
        }
        for &e in &spec.b_sets[l] {
            gw.set(DIM_FLAG_A, e, -half);
            gw.set(DIM_FLAG_B, e, half);
            gw.set(DIM_QUERY, e, spec.query_gain);
        }
        for &e in &spec.u_sets[l] {
            gw.set(DIM_CONTENT_ON, e, spec.utility_gain);
        }
        layer.gate_w = gw;

        let behavior = |target: usize| {
            let mut x = Expert::zeros(d, f);
            x.w1.set(DIM_QUERY, 0, 1.0);
            x.b1.set(0, 0, -0.5);
            x.w2.set(0, target, 2.0 * spec.behavior_gain);
            x.b2.set(0, target, spec.behavior_leak);
            x
        };
        for &e in &spec.a_sets[l] {
            layer.experts[e] = behavior(DIM_EVIDENCE_A);
        }
        for &e in &spec.b_sets[l] {
            layer.experts[e] = behavior(DIM_EVIDENCE_B);
        }
        for &e in &spec.u_sets[l] {
            let mut x = Expert::zeros(d, f);
            for c in 0..n {
                x.w1.set(FIRST_CONTENT_DIM + c, c, 1.0);
                x.b1.set(0, c, -0.5);
                x.w2.set(c, answer_dim(spec.successor(c)), spec.answer_gain);
            }
            layer.experts[e] = x;
        }
    }

    model.head_w.set(DIM_EVIDENCE_A, OUT_A, 1.0);
    model.head_w.set(DIM_EVIDENCE_B, OUT_B, 1.0);
    for c in 0..n {
        model.head_w.set(answer_dim(c), FIRST_CONTENT + c, 1.0);
    }
    model.head_b.set(0, JUNK, spec.junk_bias);
    for t in [FLAG_A, FLAG_B, QUERY] {
        model.head_b.set(0, t, -1.0);
    }
    model.meta = serde_json::json!({ "fixture": "planted", "circuit": spec });
    model.validate()?;
    Ok(model)
}

/// Reads the circuit back from a fixture checkpoint's metadata.
pub fn circuit_of(model: &ToyMoEModel) -> Option<CircuitSpec> {
    serde_json::from_value(model.meta.get("circuit")?.clone()).ok()
}

/// Behavior requested by a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Behavior {
    A,
    B,
}

impl Behavior {
    pub fn label(self) -> u8 {
        match self {
            Self::A => 0,
            Self::B => 1,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            0 => Some(Self::A),
            1 => Some(Self::B),
            _ => None,
        }
    }

    pub fn output_token(self) -> usize {
        match self {
            Self::A => OUT_A,
            Self::B => OUT_B,
        }
    }

    fn flag(self) -> usize {
        match self {
            Self::A => FLAG_A,
            Self::B => FLAG_B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub behavior: Behavior,
}

fn content_run<R: Rng>(rng: &mut R, n: usize, len: std::ops::RangeInclusive<usize>) -> Vec<usize> {
    let m = rng.random_range(len);
    (0..m).map(|_| FIRST_CONTENT + rng.random_range(0..n)).collect()
}

/// `per_class` prompts for each behavior, shuffled.
pub fn behavior_prompts(spec: &CircuitSpec, per_class: usize, seed: u64) -> Vec<Prompt> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for behavior in [Behavior::A, Behavior::B] {
        for _ in 0..per_class {
            let mut tokens = vec![behavior.flag()];
            tokens.extend(content_run(&mut rng, spec.content_tokens, 6..=10));
            tokens.push(QUERY);
            out.push(Prompt { tokens, behavior });
        }
    }
    out.shuffle(&mut rng);
    out
}

/// Held-out utility task: content-only sequences whose expected next token
/// is the successor of the last content token.
pub fn utility_task(spec: &CircuitSpec, count: usize, seed: u64) -> Vec<(Vec<usize>, usize)> {
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| {
            let tokens = content_run(&mut rng, spec.content_tokens, 6..=10);
            let last = tokens[tokens.len() - 1] - FIRST_CONTENT;
            let target = FIRST_CONTENT + spec.successor(last);
            (tokens, target)
        })
        .collect()
}

/// Labels a model output by its final token: `OUT_A → 0`, `OUT_B → 1`,
/// anything else abstains.
pub fn label_output(output_tokens: &[usize]) -> Option<u8> {
    match output_tokens.last() {
        Some(&OUT_A) => Some(0),
        Some(&OUT_B) => Some(1),
        _ => None,
    }
}
