// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape graph of the surrogate over length-sorted packed batches.
//!
//! A batch is laid out time-major: step `t` holds one row per sequence that
//! is still running, and because sequences are sorted by decreasing length
//! those rows are always a prefix of the batch. A sequence's final hidden
//! state is read at its own last step, so padded steps never exist.

use crate::error::Result;
use crate::numerics::{Array, Tape, Var};
use crate::surrogate::{SurrogateParams, NORM_EPS};
use crate::traces::RoutingTrace;

/// Length-sorted layout of a batch.
#[derive(Debug, Clone)]
pub(crate) struct Packing {
    /// Batch positions sorted by decreasing length (stable).
    pub order: Vec<usize>,
    /// Running sequences at each step.
    pub active: Vec<usize>,
    /// First packed row of each step.
    pub offsets: Vec<usize>,
}

impl Packing {
    pub(crate) fn new(lengths: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let active: Vec<usize> = (0..steps).map(|t| lengths.iter().filter(|&&n| n > t).count()).collect();
        let mut offsets = Vec::with_capacity(steps);
        let mut acc = 0;
        for &n in &active {
            offsets.push(acc);
            acc += n;
        }
        Self { order, active, offsets }
    }

    pub(crate) fn rows(&self) -> usize {
        self.active.iter().sum()
    }

    /// Packed `rows × L·E` input matrix.
    pub(crate) fn pack(&self, traces: &[&RoutingTrace]) -> Array {
        let width = traces.first().map_or(0, |t| t.layers() * t.experts());
        let mut data = Vec::with_capacity(self.rows() * width);
        for (t, &n) in self.active.iter().enumerate() {
            for &i in &self.order[..n] {
                let tr = traces[i];
                data.extend_from_slice(&tr.logits().data()[t * width..(t + 1) * width]);
            }
        }
        Array::matrix(self.rows(), width, data).expect("sized above")
    }

    /// Scatters a packed gradient back to one `T × L × E` array per trace,
    /// in batch order.
    pub(crate) fn unpack(&self, packed: &Array, traces: &[&RoutingTrace]) -> Vec<Array> {
        let mut out: Vec<Array> = traces.iter().map(|t| Array::zeros(t.logits().shape())).collect();
        let width = packed.cols();
        for (t, &n) in self.active.iter().enumerate() {
            for (j, &i) in self.order[..n].iter().enumerate() {
                let src = packed.row_slice(self.offsets[t] + j);
                out[i].data_mut()[t * width..(t + 1) * width].copy_from_slice(src);
            }
        }
        out
    }
}

/// Surrogate parameters bound to a tape.
pub(crate) struct Bound {
    /// Leaves in `PARAM_NAMES` order.
    pub leaves: [Var; 7],
    proj_wt: Var,
    head_wt: Var,
}

pub(crate) fn bind(tape: &mut Tape, params: &SurrogateParams, trainable: bool) -> Bound {
    let leaves = params.arrays().map(|a| {
        if trainable {
            tape.param(a.clone())
        } else {
            tape.constant(a.clone())
        }
    });
    let proj_wt = tape.transpose(leaves[0]);
    let head_wt = tape.transpose(leaves[5]);
    Bound {
        leaves,
        proj_wt,
        head_wt,
    }
}

/// Behavior logits (`n × 1`, in packing order) for the packed input `x`.
pub(crate) fn logits(
    tape: &mut Tape,
    b: &Bound,
    params: &SurrogateParams,
    x: Var,
    packing: &Packing,
) -> Result<Var> {
    let (l, e, d, hd) = (params.layers, params.experts, params.embed_dim(), params.hidden_dim());
    let [_, proj_b, w_ih, w_hh, bias, _, head_b] = b.leaves;
    let rows = packing.rows();

    let xn = tape.group_norm(x, e, NORM_EPS)?;
    let xr = tape.reshape(xn, rows * l, e)?;
    let v = tape.matmul(xr, b.proj_wt)?;
    let v = tape.add_row(v, proj_b)?;
    let z = tape.reshape(v, rows, l * d)?;
    let zi = tape.matmul(z, w_ih)?;
    let zi = tape.add_row(zi, bias)?;

    let mut state: Option<(Var, Var)> = None;
    let mut finals = Vec::new();
    for (t, &n) in packing.active.iter().enumerate() {
        let mut pre = tape.slice_rows(zi, packing.offsets[t], n)?;
        let mut c_prev = None;
        if let Some((h, c)) = state {
            let h = tape.slice_rows(h, 0, n)?;
            let rec = tape.matmul(h, w_hh)?;
            pre = tape.add(pre, rec)?;
            c_prev = Some(tape.slice_rows(c, 0, n)?);
        }
        let i = tape.slice_cols(pre, 0, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(pre, hd, hd)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(pre, 2 * hd, hd)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(pre, 3 * hd, hd)?;
        let o = tape.sigmoid(o);
        let ig = tape.mul(i, g)?;
        let c = match c_prev {
            Some(cp) => {
                let fc = tape.mul(f, cp)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        let next = packing.active.get(t + 1).copied().unwrap_or(0);
        if next < n {
            finals.push(tape.slice_rows(h, next, n - next)?);
        }
        state = Some((h, c));
    }
    finals.reverse();
    let hf = tape.concat_rows(&finals)?;
    let y = tape.matmul(hf, b.head_wt)?;
    tape.add_row(y, head_b)
}
