// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration tests: seeded random arrays and
//! central finite differences.

#![allow(dead_code)]

use moesteer::numerics::{seeded_rng, Tape, Var};
use moesteer::Array;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Central differences of a scalar function at `x`.
pub fn central_diff(f: impl Fn(&Array) -> f64, x: &Array, h: f64) -> Array {
    let mut g = Array::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest element-wise relative error, with `floor` guarding entries where
/// both gradients are essentially zero and finite-difference truncation
/// error dominates.
pub fn max_rel_err(analytic: &Array, numeric: &Array, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn assert_grad_close(what: &str, analytic: &Array, numeric: &Array, tol: f64, floor: f64) {
    let err = max_rel_err(analytic, numeric, floor);
    assert!(
        err <= tol,
        "{what}: relative error {err:e} > {tol:e}\nanalytic {:?}\nnumeric  {:?}",
        analytic.data(),
        numeric.data()
    );
}

/// Analytic gradients of a tape-built scalar with respect to every input,
/// checked against central differences of the same builder.
pub fn check_tape_gradients(
    what: &str,
    inputs: &[Array],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    tol: f64,
) {
    let eval = |xs: &[Array]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let loss = build(&mut t, &vars);
        t.scalar(loss)
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let loss = build(&mut t, &vars);
    let grads = t.backward(loss).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let numeric = central_diff(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs)
            },
            x,
            1e-5,
        );
        assert_grad_close(&format!("{what} input {i}"), &grads.get(vars[i]), &numeric, tol, 1e-6);
    }
}
