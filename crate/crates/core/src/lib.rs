// SPDX-License-Identifier: MIT OR Apache-2.0

//! Surrogate-guided steering of Mixture-of-Experts routers.
//!
//! The pipeline has three phases:
//!
//! 1. **Behavior modelling** ([`surrogate`]): an LSTM learns to predict a
//!    binary behavior from the raw gate logits of every MoE layer.
//! 2. **Mask creation** ([`steering`]): a dense `layers × experts` steering
//!    matrix is optimized through the frozen surrogate under an L1 penalty and
//!    pruned to a sparse mask with a symmetric magnitude gate.
//! 3. **Mask application** ([`moe`]): the mask, scaled by per-layer logit
//!    standard deviations and an amplitude, is added to the gate logits
//!    before top-k selection.
//!
//! [`moe`] also provides a desk-scale MoE model with planted behavior
//! circuits, [`traces`] the routing-trace datasets and their file format, and
//! [`analysis`] selection-frequency accounting, utility checks and
//! hyperparameter sweeps.

pub mod analysis;
pub mod container;
pub mod error;
pub mod moe;
pub mod numerics;
pub mod steering;
pub mod surrogate;
pub mod traces;

pub use error::{Error, Result};
pub use numerics::Array;
