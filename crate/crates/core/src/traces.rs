// SPDX-License-Identifier: MIT OR Apache-2.0

//! Routing-logit traces: collection, stratified splitting and the
//! `MASCTRC1` file format.
//!
//! ```text
//! magic       "MASCTRC1"
//! header_len  u32 LE
//! header      JSON {format_version, layers, experts, count, creator, convention}
//! records     count × {T u32, L u32, E u32, label u8, source_len u32,
//!                      source UTF-8, T·L·E f32 LE logits}
//! ```
//!
//! Each record repeats `L` and `E` so a reader can name the first trace
//! that disagrees with the header. Logits are stored as `f32`; traces built
//! by [`collect_traces`] are already rounded to `f32` so files round-trip
//! bit-exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{atomic_write, read_file, Reader};
use crate::error::{Error, Result};
use crate::moe::{GateHook, ToyMoEModel};
use crate::numerics::{seeded_rng, Array};

pub const TRACE_MAGIC: &[u8; 8] = b"MASCTRC1";
pub const TRACE_FORMAT_VERSION: u32 = 1;
/// Capture convention of traces produced by this crate.
pub const RAW_GATE_CONVENTION: &str = "raw affine gate output";

/// Gate logits of one prompt with its behavior label.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    /// `T × L × E`.
    logits: Array,
    label: u8,
    pub source: String,
}

impl RoutingTrace {
    pub fn new(logits: Array, label: u8, source: impl Into<String>) -> Result<Self> {
        if logits.shape().len() != 3 || logits.shape()[0] == 0 {
            return Err(Error::shape(
                "RoutingTrace",
                format!("logits must be T×L×E with T ≥ 1, got {:?}", logits.shape()),
            ));
        }
        if label > 1 {
            return Err(Error::Contract(format!("label must be 0 or 1, got {label}")));
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite("trace logits".into()));
        }
        Ok(Self {
            logits,
            label,
            source: source.into(),
        })
    }

    pub fn logits(&self) -> &Array {
        &self.logits
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn tokens(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn layers(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn experts(&self) -> usize {
        self.logits.shape()[2]
    }

    /// Logits of token `t` at layer `l`.
    pub fn at(&self, t: usize, l: usize) -> &[f64] {
        let e = self.experts();
        let at = (t * self.layers() + l) * e;
        &self.logits.data()[at..at + e]
    }

    /// Same trace with a different label.
    pub fn relabeled(&self, label: u8) -> Result<Self> {
        Self::new(self.logits.clone(), label, self.source.clone())
    }
}

/// Traces sharing one `(L, E)` geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    layers: usize,
    experts: usize,
    traces: Vec<RoutingTrace>,
    pub creator: String,
    pub convention: String,
}

impl TraceDataset {
    pub fn new(layers: usize, experts: usize) -> Self {
        Self {
            layers,
            experts,
            traces: Vec::new(),
            creator: format!("moesteer {}", env!("CARGO_PKG_VERSION")),
            convention: RAW_GATE_CONVENTION.to_string(),
        }
    }

    pub fn from_traces(layers: usize, experts: usize, traces: Vec<RoutingTrace>) -> Result<Self> {
        let mut d = Self::new(layers, experts);
        for t in traces {
            d.push(t)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, trace: RoutingTrace) -> Result<()> {
        if trace.layers() != self.layers || trace.experts() != self.experts {
            return Err(Error::Inconsistent {
                trace_index: self.traces.len(),
                detail: format!(
                    "trace is {}x{}, dataset declares {}x{}",
                    trace.layers(),
                    trace.experts(),
                    self.layers,
                    self.experts
                ),
            });
        }
        self.traces.push(trace);
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn traces(&self) -> &[RoutingTrace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Number of traces with label 0 and label 1.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0, 0];
        for t in &self.traces {
            c[t.label as usize] += 1;
        }
        c
    }

    /// Traces at `indices`, same geometry and provenance.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            layers: self.layers,
            experts: self.experts,
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
            creator: self.creator.clone(),
            convention: self.convention.clone(),
        }
    }

    /// Keeps the first `min(class counts)` traces of each class, in their
    /// original order.
    pub fn balanced(&self) -> Self {
        let [a, b] = self.class_counts();
        let n = a.min(b);
        let mut seen = [0usize; 2];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.traces[i].label as usize];
                *c += 1;
                *c <= n
            })
            .collect();
        self.subset(&idx)
    }

    /// Traces carrying `label`.
    pub fn with_label(&self, label: u8) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.traces[i].label == label).collect();
        self.subset(&idx)
    }
}

/// Output of [`collect_traces`].
#[derive(Debug, Clone, PartialEq)]
pub struct Collected {
    pub dataset: TraceDataset,
    /// Indices (into the prompt list) of the traces kept, in order.
    pub kept: Vec<usize>,
    /// Prompts the labeler declined to label.
    pub abstained: usize,
}

/// Runs every prompt through `model` with a capture hook and labels it from
/// the greedy output tokens. Logits are rounded to `f32` precision.
pub fn collect_traces(
    model: &ToyMoEModel,
    prompts: &[Vec<usize>],
    labeler: impl Fn(&[usize]) -> Option<u8>,
) -> Result<Collected> {
    let c = &model.config;
    let mut dataset = TraceDataset::new(c.num_layers, c.experts_per_layer);
    let mut kept = Vec::new();
    let mut abstained = 0;
    let hook = GateHook::capture();
    for (i, tokens) in prompts.iter().enumerate() {
        let out = model.forward(tokens, Some(&hook))?;
        let Some(label) = labeler(&out.argmax_tokens()) else {
            abstained += 1;
            continue;
        };
        let cap = out.capture.expect("capture hook records logits");
        let logits = cap.pre.map(|v| v as f32 as f64);
        dataset.push(RoutingTrace::new(logits, label, format!("prompt-{i}"))?)?;
        kept.push(i);
    }
    if abstained > 0 {
        tracing::info!(abstained, kept = kept.len(), "labeler abstained on some prompts");
    }
    Ok(Collected {
        dataset,
        kept,
        abstained,
    })
}

/// Stratified train/validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.8,
            seed,
        }
    }
}

/// Per-class train counts: `floor(f·n_c)` for each class, then single
/// samples are moved to the training side (largest remainder first, lower
/// class on ties) until the total reaches `round(f·N)`. Every class keeps at
/// least one validation sample.
pub fn stratified_counts(counts: [usize; 2], fraction: f64) -> [usize; 2] {
    let mut train = counts.map(|n| ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1)));
    let total: usize = counts.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    while train.iter().sum::<usize>() < target {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..2 {
            if train[c] + 1 >= counts[c] {
                continue;
            }
            let rem = fraction * counts[c] as f64 - train[c] as f64;
            if best.is_none_or(|(_, r)| rem > r) {
                best = Some((c, rem));
            }
        }
        match best {
            Some((c, _)) => train[c] += 1,
            None => break,
        }
    }
    train
}

/// Splits `dataset` into disjoint, class-stratified (train, validation)
/// parts. Both parts list traces in their original order.
pub fn split(dataset: &TraceDataset, spec: &SplitSpec) -> Result<(TraceDataset, TraceDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let counts = dataset.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n < 2 {
            return Err(Error::Split(format!("class {c} has {n} samples, need at least 2")));
        }
    }
    let want = stratified_counts(counts, spec.train_fraction);
    let mut rng = seeded_rng(spec.seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (c, &n_train) in want.iter().enumerate() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.traces[i].label as usize == c)
            .collect();
        idx.shuffle(&mut rng);
        train_idx.extend_from_slice(&idx[..n_train]);
        val_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&val_idx)))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    format_version: u32,
    layers: usize,
    experts: usize,
    count: usize,
    creator: String,
    convention: String,
}

pub fn encode_traces(dataset: &TraceDataset) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&TraceHeader {
        format_version: TRACE_FORMAT_VERSION,
        layers: dataset.layers,
        experts: dataset.experts,
        count: dataset.len(),
        creator: dataset.creator.clone(),
        convention: dataset.convention.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &dataset.traces {
        for n in [t.tokens(), t.layers(), t.experts()] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.push(t.label);
        out.extend_from_slice(&(t.source.len() as u32).to_le_bytes());
        out.extend_from_slice(t.source.as_bytes());
        for &v in t.logits.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_traces(bytes: &[u8]) -> Result<TraceDataset> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != TRACE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a trace file (bad magic)".into(),
        });
    }
    let len = r.u32()? as usize;
    let header_at = r.offset();
    let header: TraceHeader = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
        offset: header_at,
        detail: format!("bad trace header: {e}"),
    })?;
    if header.format_version != TRACE_FORMAT_VERSION {
        return Err(Error::Format {
            offset: header_at,
            detail: format!(
                "unsupported trace format version {}, expected {TRACE_FORMAT_VERSION}",
                header.format_version
            ),
        });
    }
    let mut d = TraceDataset::new(header.layers, header.experts);
    d.creator = header.creator;
    d.convention = header.convention;
    for i in 0..header.count {
        let at = r.offset();
        let (t, l, e) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if l != header.layers || e != header.experts {
            return Err(Error::Inconsistent {
                trace_index: i,
                detail: format!(
                    "record at byte {at} is {l}x{e}, header declares {}x{}",
                    header.layers, header.experts
                ),
            });
        }
        let label_at = r.offset();
        let label = r.u8()?;
        let src_len = r.u32()? as usize;
        let source = String::from_utf8(r.take(src_len)?.to_vec()).map_err(|_| Error::Format {
            offset: label_at + 5,
            detail: format!("trace {i}: source id is not UTF-8"),
        })?;
        let n = t
            .checked_mul(l)
            .and_then(|x| x.checked_mul(e))
            .ok_or_else(|| Error::Format {
                offset: at,
                detail: format!("trace {i}: size overflow"),
            })?;
        let data: Vec<f64> = r.f32s(n)?.into_iter().map(f64::from).collect();
        let logits = Array::new(vec![t, l, e], data)?;
        let trace = RoutingTrace::new(logits, label, source).map_err(|err| Error::Format {
            offset: at,
            detail: format!("trace {i}: {err}"),
        })?;
        d.traces.push(trace);
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            detail: format!("{} trailing bytes after {} traces", r.remaining(), header.count),
        });
    }
    Ok(d)
}

pub fn save_traces(dataset: &TraceDataset, path: &Path) -> Result<()> {
    atomic_write(path, &encode_traces(dataset)?)
}

pub fn load_traces(path: &Path) -> Result<TraceDataset> {
    decode_traces(&read_file(path)?)
}
