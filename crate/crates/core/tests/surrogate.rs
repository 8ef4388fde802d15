// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{assert_grad_close, central_diff, rng, uniform};
use moesteer::moe::fixture::{behavior_prompts, label_output};
use moesteer::moe::{build_planted_fixture, CircuitSpec};
use moesteer::surrogate::{
    bce_with_logits, classify, embed_token, flatten_token, forward_trace, input_gradient, lstm_step, mean_bce,
    normalize_layer, predict_proba, project, train_surrogate, SurrogateConfig, SurrogateParams,
};
use moesteer::traces::{collect_traces, RoutingTrace, TraceDataset};
use moesteer::Array;
use proptest::prelude::*;
use rand::Rng;

const L: usize = 3;
const E: usize = 5;
const D: usize = 4;
const H: usize = 6;

fn params(seed: u64) -> SurrogateParams {
    SurrogateParams::init(L, E, D, H, seed)
}

fn random_trace(seed: u64, t: usize) -> RoutingTrace {
    let mut r = rng(seed);
    let logits = uniform(&mut r, t, L * E, -3.0, 3.0).reshape(&[t, L, E]).unwrap();
    RoutingTrace::new(logits, 0, "r").unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn normalize_standardizes_one_to_four() {
    let y = normalize_layer(&[1.0, 2.0, 3.0, 4.0]);
    let want = [-1.3416, -0.4472, 0.4472, 1.3416];
    for (a, b) in y.iter().zip(want) {
        assert!(close(*a, b, 1e-4), "{y:?}");
    }
}

#[test]
fn normalize_maps_constant_to_zero() {
    assert_eq!(normalize_layer(&[2.5, 2.5, 2.5]), vec![0.0, 0.0, 0.0]);
}

#[test]
fn normalize_is_idempotent_on_standardized_input() {
    let once = normalize_layer(&[0.3, -1.2, 4.0, 2.2, -0.7]);
    let twice = normalize_layer(&once);
    for (a, b) in once.iter().zip(&twice) {
        assert!(close(*a, *b, 1e-4));
    }
}

#[test]
fn projection_examples() {
    let mut p = params(1);
    p.proj_w = Array::zeros(&[D, E]);
    p.proj_b = Array::row(vec![0.5, -1.0, 2.0, 0.25]);
    assert_eq!(project(&p, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), vec![0.5, -1.0, 2.0, 0.25]);

    let mut p = params(2);
    p.proj_b = Array::zeros(&[1, D]);
    for j in 0..E {
        let mut e = vec![0.0; E];
        e[j] = 1.0;
        let col: Vec<f64> = (0..D).map(|i| p.proj_w.at(i, j)).collect();
        assert_eq!(project(&p, &e).unwrap(), col);
    }

    let p = params(3);
    let x = [0.4, -1.1, 0.9, 0.0, 2.0];
    let got = project(&p, &x).unwrap();
    let wx = moesteer::numerics::matmul(&p.proj_w, &Array::matrix(E, 1, x.to_vec()).unwrap()).unwrap();
    for i in 0..D {
        assert!(close(got[i], wx.at(i, 0) + p.proj_b.at(0, i), 1e-12));
    }
    assert!(project(&p, &x[..4]).is_err());
}

#[test]
fn flatten_concatenates_in_layer_order() {
    assert_eq!(flatten_token(&[vec![1.0, 2.0, 3.0]]), vec![1.0, 2.0, 3.0]);
    assert_eq!(flatten_token(&[vec![1.0, 2.0], vec![3.0, 4.0]]), vec![1.0, 2.0, 3.0, 4.0]);
    let parts = vec![vec![0.0; 7]; 5];
    assert_eq!(flatten_token(&parts).len(), 35);
}

#[test]
fn lstm_with_zero_params_and_state_stays_zero() {
    let mut p = params(4);
    p.w_ih = Array::zeros(p.w_ih.shape());
    p.w_hh = Array::zeros(p.w_hh.shape());
    p.bias = Array::zeros(p.bias.shape());
    let (h, c) = lstm_step(&p, &vec![0.7; L * D], &[0.0; H], &[0.0; H]).unwrap();
    assert_eq!((h.len(), c.len()), (H, H));
    assert!(h.iter().chain(&c).all(|&v| v == 0.0));
}

#[test]
fn lstm_step_matches_scalar_formula() {
    let p = params(5);
    let mut r = rng(6);
    let z: Vec<f64> = (0..L * D).map(|_| r.random_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..H).map(|_| r.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..H).map(|_| r.random_range(-1.0..1.0)).collect();
    let (h2, c2) = lstm_step(&p, &z, &h, &c).unwrap();
    // gate(k, j) = b + Σ z·W_ih[:, kH+j] + Σ h·W_hh[:, kH+j], gates ordered i, f, g, o.
    let gate = |k: usize, j: usize| {
        let col = k * H + j;
        let mut s = p.bias.at(0, col);
        for (a, &zv) in z.iter().enumerate() {
            s += zv * p.w_ih.at(a, col);
        }
        for (a, &hv) in h.iter().enumerate() {
            s += hv * p.w_hh.at(a, col);
        }
        s
    };
    for j in 0..H {
        let cj = sig(gate(1, j)) * c[j] + sig(gate(0, j)) * gate(2, j).tanh();
        let hj = sig(gate(3, j)) * cj.tanh();
        assert!(close(c2[j], cj, 1e-12) && close(h2[j], hj, 1e-12), "unit {j}");
    }
}

#[test]
fn classify_examples() {
    let mut p = params(7);
    let h: Vec<f64> = (0..H).map(|i| i as f64 - 2.0).collect();
    let b = p.head_b.at(0, 0);
    assert_eq!(classify(&p, &[0.0; H]).unwrap(), b);
    let dot: f64 = (0..H).map(|i| p.head_w.at(0, i) * h[i]).sum();
    assert!(close(classify(&p, &h).unwrap(), dot + b, 1e-12));
    p.head_w = Array::zeros(&[1, H]);
    assert_eq!(classify(&p, &h).unwrap(), b);
}

#[test]
fn single_token_trace_is_one_step_and_classify() {
    let p = params(8);
    let tr = random_trace(9, 1);
    let z = embed_token(&p, &tr, 0).unwrap();
    let (h, _) = lstm_step(&p, &z, &[0.0; H], &[0.0; H]).unwrap();
    assert_eq!(forward_trace(&p, &tr).unwrap(), classify(&p, &h).unwrap());
}

#[test]
fn token_order_matters() {
    let p = params(10);
    let tr = random_trace(11, 3);
    let mut swapped = tr.logits().clone();
    let n = L * E;
    let (first, rest) = swapped.data_mut().split_at_mut(n);
    first.swap_with_slice(&mut rest[n..2 * n]);
    let tr2 = RoutingTrace::new(swapped, 0, "swapped").unwrap();
    let (a, b) = (forward_trace(&p, &tr).unwrap(), forward_trace(&p, &tr2).unwrap());
    assert!((a - b).abs() > 1e-6, "{a} vs {b}");
    assert_eq!(forward_trace(&p, &tr.clone()).unwrap(), a);
}

#[test]
fn batched_graph_agrees_with_direct_evaluation() {
    let p = params(12);
    let traces: Vec<RoutingTrace> = (0..7).map(|i| random_trace(100 + i, 1 + (i as usize * 3) % 5)).collect();
    let d = TraceDataset::from_traces(L, E, traces.clone()).unwrap();
    for (prob, tr) in predict_proba(&p, &d).unwrap().iter().zip(&traces) {
        assert!(close(*prob, sig(forward_trace(&p, tr).unwrap()), 1e-12));
    }
}

#[test]
fn bce_examples() {
    assert!(close(bce_with_logits(0.0, 1.0), std::f64::consts::LN_2, 1e-6));
    assert!(bce_with_logits(30.0, 1.0) < 1e-12);
    let big = bce_with_logits(-30.0, 1.0);
    assert!(close(big, 30.0, 1e-9), "{big}");
    assert!(bce_with_logits(-800.0, 1.0).is_finite());
    assert!(close(mean_bce(&[0.0, 30.0], &[1.0, 1.0]), std::f64::consts::LN_2 / 2.0, 1e-6));
}

#[test]
fn input_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let p = params(20 + seed);
        let tr = random_trace(30 + seed, 4);
        for target in [0u8, 1] {
            let g = input_gradient(&p, &tr, target).unwrap();
            let loss = |x: &Array| {
                let t = RoutingTrace::new(x.clone(), 0, "fd").unwrap();
                bce_with_logits(forward_trace(&p, &t).unwrap(), target as f64)
            };
            let n = central_diff(loss, tr.logits(), 1e-4);
            assert_grad_close(&format!("seed {seed} target {target}"), &g, &n, 1e-4, 1e-7);
        }
    }
}

#[test]
fn saturated_head_has_vanishing_input_gradient() {
    let mut p = params(40);
    p.head_b = Array::full(&[1, 1], 50.0);
    let tr = random_trace(41, 3);
    assert!(forward_trace(&p, &tr).unwrap() > 30.0);
    assert!(input_gradient(&p, &tr, 1).unwrap().max_abs() < 1e-8);
}

#[test]
fn constant_token_row_has_finite_gradient() {
    let p = params(42);
    let mut logits = random_trace(43, 3).logits().clone();
    for e in 0..E {
        logits.data_mut()[E + e] = 1.5;
    }
    let tr = RoutingTrace::new(logits, 0, "flat").unwrap();
    assert!(input_gradient(&p, &tr, 1).unwrap().is_finite());
}

fn fixture_dataset(seed: u64, per_class: usize) -> TraceDataset {
    let spec = CircuitSpec::rotating(4, 8, 2).unwrap();
    let model = build_planted_fixture(&spec.model_config(8, 2, seed), &spec).unwrap();
    let tokens: Vec<Vec<usize>> = behavior_prompts(&spec, per_class, seed + 1000)
        .into_iter()
        .map(|p| p.tokens)
        .collect();
    collect_traces(&model, &tokens, label_output).unwrap().dataset
}

#[test]
fn random_labels_give_chance_accuracy() {
    let d = fixture_dataset(0, 600);
    let mut r = rng(77);
    let shuffled: Vec<RoutingTrace> = d
        .traces()
        .iter()
        .map(|t| t.relabeled(r.random_range(0..2)).unwrap())
        .collect();
    let d = TraceDataset::from_traces(4, 8, shuffled).unwrap();
    let (_, hist) = train_surrogate(&d, &SurrogateConfig::new(0)).unwrap();
    assert!(hist.val_size >= 200);
    let acc = hist.final_val_accuracy();
    assert!((0.35..=0.65).contains(&acc), "validation accuracy {acc:.3}");
}

#[test]
fn training_is_seeded() {
    let d = fixture_dataset(1, 40);
    let cfg = SurrogateConfig {
        epochs: 3,
        ..SurrogateConfig::new(5)
    };
    assert_eq!(train_surrogate(&d, &cfg).unwrap(), train_surrogate(&d, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // The ε guard makes scale invariance approximate: relative error is about
    // ε/(2·var), so the trace uses gate-sized logits (spread of several
    // units) and scales stay at or above one.
    #[test]
    fn per_layer_affine_changes_leave_logit_unchanged(
        seed in 0u64..500,
        scales in prop::collection::vec(1.0f64..5.0, 3 * L),
        shifts in prop::collection::vec(-10.0f64..10.0, 3 * L),
    ) {
        let p = params(seed);
        let mut r = rng(seed + 1);
        let tr = RoutingTrace::new(uniform(&mut r, 3, L * E, -8.0, 8.0).reshape(&[3, L, E]).unwrap(), 0, "g").unwrap();
        let mut x = tr.logits().clone();
        for t in 0..3 {
            for l in 0..L {
                let (a, b) = (scales[t * L + l], shifts[t * L + l]);
                for v in &mut x.data_mut()[(t * L + l) * E..(t * L + l + 1) * E] {
                    *v = a * *v + b;
                }
            }
        }
        let moved = RoutingTrace::new(x, 0, "affine").unwrap();
        let (y0, y1) = (forward_trace(&p, &tr).unwrap(), forward_trace(&p, &moved).unwrap());
        prop_assert!((y0 - y1).abs() < 1e-6, "{} vs {}", y0, y1);
    }

    #[test]
    fn normalized_layer_has_zero_mean_unit_variance(x in prop::collection::vec(-50.0f64..50.0, 2..12)) {
        let y = normalize_layer(&x);
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let raw_mean = x.iter().sum::<f64>() / n;
        let raw_var = x.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        // ε inside the root shrinks the variance by raw / (raw + ε).
        prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-9);
    }
}
