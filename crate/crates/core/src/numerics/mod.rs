// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense arrays, reverse-mode differentiation and the Adam optimizer.

pub mod adam;
pub mod array;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, ParamGrad};
pub use array::{matmul, Array};
pub use tape::{bce_term, Gradients, Tape, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used throughout the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Logistic function, branch-split to avoid overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
