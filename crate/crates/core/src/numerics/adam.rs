// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::array::Array;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    first: Vec<Array>,
    second: Vec<Array>,
}

impl AdamState {
    /// Zero moments for parameters shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array>) -> Self {
        let first: Vec<Array> = params.into_iter().map(|p| Array::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            step: 0,
            first,
            second,
        }
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// A parameter, its gradient and its name (for diagnostics).
pub struct ParamGrad<'a> {
    pub name: &'a str,
    pub value: &'a mut Array,
    pub grad: &'a Array,
}

/// Applies one Adam update to every parameter in `params`.
///
/// Gradients are validated up front: a non-finite gradient aborts the step
/// before any parameter or moment is touched.
pub fn adam_step(params: &mut [ParamGrad<'_>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::Contract(format!(
            "adam state tracks {} parameters, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.value.shape() != p.grad.shape() || p.value.shape() != state.first[i].shape() {
            return Err(Error::Optimizer {
                param: p.name.to_string(),
                detail: format!(
                    "shape mismatch: param {:?}, grad {:?}, state {:?}",
                    p.value.shape(),
                    p.grad.shape(),
                    state.first[i].shape()
                ),
            });
        }
        if !p.grad.is_finite() {
            return Err(Error::Optimizer {
                param: p.name.to_string(),
                detail: "non-finite gradient".into(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(value: &mut Array, grad: &Array, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
        let mut ps = [ParamGrad {
            name: "w",
            value,
            grad,
        }];
        adam_step(&mut ps, state, cfg)
    }

    #[test]
    fn zero_gradient_leaves_params_but_advances_counter() {
        let mut w = Array::row(vec![1.0, -2.0]);
        let mut st = AdamState::new([&w]);
        let before = w.clone();
        step_once(&mut w, &Array::zeros(&[1, 2]), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(w, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig::default();
        let mut w = Array::row(vec![0.0, 0.0, 0.0]);
        let g = Array::row(vec![3.0, -0.5, 1e-3]);
        let mut st = AdamState::new([&w]);
        step_once(&mut w, &g, &mut st, &cfg).unwrap();
        for (&wi, &gi) in w.data().iter().zip(g.data()) {
            let expect = -gi.signum() * cfg.lr;
            // |g| / (|g| + eps) deviates from 1 by at most eps/|g|.
            assert!((wi - expect).abs() <= cfg.lr * cfg.eps / gi.abs() + 1e-15);
        }
    }

    #[test]
    fn quadratic_distance_strictly_decreases() {
        // Scalar reference: f(p) = (p − 3)², lr = 0.01, 100 steps from 0.
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = Array::scalar(0.0);
        let mut st = AdamState::new([&p]);
        let mut last = 3.0_f64;
        for _ in 0..100 {
            let g = Array::scalar(2.0 * (p.data()[0] - 3.0));
            step_once(&mut p, &g, &mut st, &cfg).unwrap();
            let d = (p.data()[0] - 3.0).abs();
            assert!(d < last, "{d} !< {last}");
            last = d;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut w = Array::row(vec![1.0]);
        let mut st = AdamState::new([&w]);
        let err = {
            let mut ps = [ParamGrad {
                name: "proj_w",
                value: &mut w,
                grad: &Array::row(vec![f64::NAN]),
            }];
            adam_step(&mut ps, &mut st, &AdamConfig::default()).unwrap_err()
        };
        match err {
            Error::Optimizer { param, .. } => assert_eq!(param, "proj_w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(st.step(), 0);
    }
}
