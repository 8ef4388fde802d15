// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale Mixture-of-Experts model with gate hooks.

pub mod config;
pub mod fixture;
pub mod hook;
pub mod model;
pub mod routing;
pub mod train;

pub use config::{MoEConfig, SoftmaxMode};
pub use fixture::{build_planted_fixture, Behavior, CircuitSpec, Prompt};
pub use hook::{Capture, GateHook, HookMode, InjectionPayload, FORCE_LOGIT};
pub use model::{argmax_rows, Expert, ForwardOutput, MoELayer, ToyMoEModel};
pub use routing::{top_k_select, Selection};
pub use train::{init_model, train_toy_moe, TrainConfig, TrainReport};
