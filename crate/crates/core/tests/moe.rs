// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{rng, uniform};
use moesteer::moe::fixture::{behavior_prompts, label_output, FLAG_A, FLAG_B, OUT_A, OUT_B, QUERY};
use moesteer::moe::{
    build_planted_fixture, init_model, top_k_select, train_toy_moe, Behavior, CircuitSpec, GateHook, InjectionPayload,
    MoEConfig, SoftmaxMode, ToyMoEModel, TrainConfig,
};
use moesteer::numerics::matmul;
use moesteer::{Array, Error};
use proptest::prelude::*;

const LAYERS: usize = 4;
const EXPERTS: usize = 8;
const K: usize = 2;

fn planted(seed: u64) -> (ToyMoEModel, CircuitSpec) {
    let spec = CircuitSpec::rotating(LAYERS, EXPERTS, K).unwrap();
    let model = build_planted_fixture(&spec.model_config(EXPERTS, K, seed), &spec).unwrap();
    (model, spec)
}

/// Planted fixture without gate noise: routing depends only on the flag.
fn clean(seed: u64) -> (ToyMoEModel, CircuitSpec) {
    let mut spec = CircuitSpec::rotating(LAYERS, EXPERTS, K).unwrap();
    spec.gate_noise = 0.0;
    let model = build_planted_fixture(&spec.model_config(EXPERTS, K, seed), &spec).unwrap();
    (model, spec)
}

fn small_config(seed: u64, shared: usize) -> MoEConfig {
    MoEConfig {
        num_layers: 2,
        experts_per_layer: 5,
        top_k: 2,
        hidden_dim: 6,
        expert_hidden_dim: 4,
        num_shared_experts: shared,
        vocab_size: 9,
        softmax_mode: SoftmaxMode::default(),
        seed,
    }
}

/// Reference top-k: stable sort by descending logit keeps lower indices first on ties.
fn reference_top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    idx.truncate(k);
    idx
}

#[test]
fn gate_logits_of_zero_hidden_is_the_bias() {
    let mut model = init_model(&small_config(3, 0)).unwrap();
    model.layers[1].gate_b = Array::row(vec![0.5, -1.0, 2.0, 0.0, 3.5]);
    let g = model.gate_logits(&Array::zeros(&[6]), 1).unwrap();
    assert_eq!(g.data(), &[0.5, -1.0, 2.0, 0.0, 3.5]);
}

#[test]
fn gate_logits_of_basis_vector_is_a_weight_row() {
    let model = init_model(&small_config(4, 0)).unwrap();
    for i in 0..6 {
        let mut e = vec![0.0; 6];
        e[i] = 1.0;
        let g = model.gate_logits(&Array::vector(e), 0).unwrap();
        assert_eq!(g.data(), model.layers[0].gate_w.row_slice(i));
    }
}

#[test]
fn gate_logits_match_matrix_product() {
    let mut model = init_model(&small_config(5, 0)).unwrap();
    let mut r = rng(21);
    model.layers[0].gate_b = uniform(&mut r, 1, 5, -1.0, 1.0);
    let h = uniform(&mut r, 1, 6, -2.0, 2.0);
    let got = model.gate_logits(&h.clone().reshape(&[6]).unwrap(), 0).unwrap();
    let want = matmul(&h, &model.layers[0].gate_w).unwrap();
    for e in 0..5 {
        let w = want.at(0, e) + model.layers[0].gate_b.at(0, e);
        assert!((got.data()[e] - w).abs() < 1e-12);
    }
}

#[test]
fn gate_logits_reject_bad_inputs() {
    let model = init_model(&small_config(6, 0)).unwrap();
    assert!(matches!(model.gate_logits(&Array::zeros(&[5]), 0), Err(Error::Shape { .. })));
    assert!(matches!(model.gate_logits(&Array::zeros(&[6]), 2), Err(Error::Contract(_))));
    let bad = Array::vector(vec![f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(matches!(model.gate_logits(&bad, 0), Err(Error::NonFinite(_))));
}

#[test]
fn top_k_example_picks_two_largest() {
    let s = top_k_select(&[0.1, 3.0, 2.0, -1.0], 2, SoftmaxMode::default()).unwrap();
    assert_eq!(s.indices, vec![1, 2]);
    assert!((s.weights[0] - 0.7311).abs() < 1e-4);
    assert!((s.weights[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn top_k_rejects_k_outside_range() {
    assert!(matches!(top_k_select(&[1.0, 2.0], 0, SoftmaxMode::default()), Err(Error::Contract(_))));
    assert!(matches!(top_k_select(&[1.0, 2.0], 3, SoftmaxMode::default()), Err(Error::Contract(_))));
}

#[test]
fn single_expert_layer_passes_that_expert_through() {
    let mut cfg = small_config(7, 0);
    cfg.experts_per_layer = 1;
    cfg.top_k = 1;
    let model = init_model(&cfg).unwrap();
    let mut r = rng(8);
    let h = uniform(&mut r, 3, 6, -1.0, 1.0);
    let (out, cap) = model.layer_forward(&h, 0, None).unwrap();
    let x = &model.layers[0].experts[0];
    let z = matmul(&h, &x.w1).unwrap();
    for t in 0..3 {
        assert_eq!(cap.selection(t, 0), &[0]);
        assert_eq!(cap.selection_weights(t, 0), &[1.0]);
        let inner: Vec<f64> = (0..4).map(|j| (z.at(t, j) + x.b1.at(0, j)).max(0.0)).collect();
        for c in 0..6 {
            let want: f64 = (0..4).map(|j| inner[j] * x.w2.at(j, c)).sum::<f64>() + x.b2.at(0, c);
            assert!((out.at(t, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_amplitude_layer_forward_is_bit_identical() {
    let model = init_model(&small_config(9, 0)).unwrap();
    let mut r = rng(10);
    let h = uniform(&mut r, 4, 6, -1.0, 1.0);
    let mask = uniform(&mut r, 2, 5, -1.0, 1.0);
    let payload = InjectionPayload::Additive {
        mask,
        sigma: vec![1.3, 0.7],
        alpha: 0.0,
    };
    let (plain, c0) = model.layer_forward(&h, 1, None).unwrap();
    let (steered, c1) = model.layer_forward(&h, 1, Some(&GateHook::both(payload))).unwrap();
    assert_eq!(plain, steered);
    assert_eq!(c0.selected, c1.selected);
    assert_eq!(c0.weights, c1.weights);
}

#[test]
fn huge_boost_forces_expert_into_selection() {
    let model = init_model(&small_config(11, 0)).unwrap();
    let mut r = rng(12);
    let h = uniform(&mut r, 5, 6, -1.0, 1.0);
    for j in 0..5 {
        let mut mask = Array::zeros(&[2, 5]);
        mask.set(0, j, 1.0);
        let payload = InjectionPayload::Additive {
            mask,
            sigma: vec![1.0, 1.0],
            alpha: 1e6,
        };
        let (_, cap) = model.layer_forward(&h, 0, Some(&GateHook::both(payload))).unwrap();
        for t in 0..5 {
            assert_eq!(cap.selection(t, 0)[0], j);
        }
    }
}

#[test]
fn forward_is_deterministic_with_full_capture() {
    let (model, _) = planted(0);
    let tokens = [FLAG_B, 7, 9, 12, 6, 20, QUERY];
    let a = model.forward(&tokens, Some(&GateHook::capture())).unwrap();
    let b = model.forward(&tokens, Some(&GateHook::capture())).unwrap();
    assert_eq!(a, b);
    let cap = a.capture.unwrap();
    assert_eq!(cap.pre.shape(), &[tokens.len(), LAYERS, EXPERTS]);
    assert_eq!(cap.selected.len(), tokens.len() * LAYERS * K);
    assert!(cap.post.is_none());
}

#[test]
fn forward_rejects_out_of_vocab_and_empty() {
    let (model, spec) = planted(0);
    assert!(matches!(model.forward(&[FLAG_A, spec.vocab_size()], None), Err(Error::Input(_))));
    assert!(matches!(model.forward(&[], None), Err(Error::Input(_))));
}

#[test]
fn clean_fixture_emits_the_flagged_behavior() {
    let (model, spec) = clean(0);
    for p in behavior_prompts(&spec, 50, 77) {
        let out = model.forward(&p.tokens, None).unwrap();
        assert_eq!(out.last_token(), p.behavior.output_token(), "{:?}", p.tokens);
        assert_eq!(label_output(&out.argmax_tokens()), Some(p.behavior.label()));
    }
}

/// Share of query-position selections in the A sets, and the rate of
/// `t_A` outputs, over the flag-A prompts of a fixture.
fn flag_a_stats(model: &ToyMoEModel, spec: &CircuitSpec, seed: u64) -> (f64, f64) {
    let (mut in_a, mut total, mut emitted, mut prompts) = (0usize, 0usize, 0usize, 0usize);
    for p in behavior_prompts(spec, 100, seed).into_iter().filter(|p| p.behavior == Behavior::A) {
        let out = model.forward(&p.tokens, Some(&GateHook::capture())).unwrap();
        emitted += (out.last_token() == OUT_A) as usize;
        prompts += 1;
        let cap = out.capture.unwrap();
        let q = p.tokens.len() - 1;
        for l in 0..LAYERS {
            for e in cap.selection(q, l) {
                in_a += spec.a_sets[l].contains(e) as usize;
                total += 1;
            }
        }
    }
    (in_a as f64 / total as f64, emitted as f64 / prompts as f64)
}

#[test]
fn clean_fixture_routes_flag_a_into_a_sets() {
    for seed in 0..3 {
        let (model, spec) = clean(seed);
        let (share, rate) = flag_a_stats(&model, &spec, 900 + seed);
        assert!(share >= 0.9, "seed {seed}: {share:.3} of query selections in A");
        assert_eq!(rate, 1.0);
    }
}

#[test]
fn noisy_fixture_still_emits_flag_a_behavior() {
    // Gate noise lets content tokens pull some query selections out of A
    // (about a quarter at the default margin), but the evidence still
    // favours t_A on the vast majority of prompts.
    for seed in 0..3 {
        let (model, spec) = planted(seed);
        let (share, rate) = flag_a_stats(&model, &spec, 900 + seed);
        assert!(share > 0.5, "seed {seed}: {share:.3} of query selections in A");
        assert!(rate >= 0.9, "seed {seed}: flag-A emitted t_A on {rate:.3} of prompts");
    }
}

#[test]
fn clean_fixture_flag_b_emits_b_token() {
    let (model, spec) = clean(1);
    for p in behavior_prompts(&spec, 40, 5).into_iter().filter(|p| p.behavior == Behavior::B) {
        assert_eq!(model.forward(&p.tokens, None).unwrap().last_token(), OUT_B);
    }
}

#[test]
fn zero_margin_falls_back_to_lowest_index() {
    let mut spec = CircuitSpec::rotating(LAYERS, EXPERTS, K).unwrap();
    spec.margin = 0.0;
    spec.gate_noise = 0.0;
    let model = build_planted_fixture(&spec.model_config(EXPERTS, K, 0), &spec).unwrap();
    for flag in [FLAG_A, FLAG_B] {
        let tokens = [flag, 8, 11, QUERY];
        let cap = model.forward(&tokens, Some(&GateHook::capture())).unwrap().capture.unwrap();
        for l in 0..LAYERS {
            let mut tied: Vec<usize> = spec.a_sets[l].iter().chain(&spec.b_sets[l]).copied().collect();
            tied.sort_unstable();
            assert_eq!(cap.selection(3, l), &tied[..K], "layer {l}");
        }
    }
}

#[test]
fn overlapping_behavior_sets_are_rejected() {
    let mut spec = CircuitSpec::rotating(LAYERS, EXPERTS, K).unwrap();
    spec.b_sets[2][0] = spec.a_sets[2][1];
    let err = build_planted_fixture(&spec.model_config(EXPERTS, K, 0), &spec).unwrap_err();
    assert!(matches!(err, Error::Spec(_)), "{err}");
}

#[test]
fn checkpoint_round_trips() {
    let (model, _) = planted(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = ToyMoEModel::load(&path).unwrap();
    assert_eq!(back, model);
    let mut bytes = model.to_bytes().unwrap();
    bytes[0] ^= 0xff;
    assert!(ToyMoEModel::from_bytes(&bytes).unwrap_err().is_format());
}

#[test]
fn trainer_memorizes_one_sample() {
    let mut cfg = small_config(13, 0);
    cfg.vocab_size = 9;
    let data = vec![(vec![1, 4, 2, 7], 5)];
    let (model, report) = train_toy_moe(
        &data,
        &TrainConfig {
            model: cfg,
            epochs: 200,
            lr: 0.01,
        },
    )
    .unwrap();
    assert_eq!(model.forward(&data[0].0, None).unwrap().last_token(), 5);
    assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
}

#[test]
fn trainer_is_deterministic() {
    let data = vec![(vec![1, 2, 3], 4), (vec![3, 2], 0), (vec![8, 8, 1], 6)];
    let tc = TrainConfig {
        model: small_config(14, 1),
        epochs: 5,
        lr: 0.01,
    };
    assert_eq!(train_toy_moe(&data, &tc).unwrap(), train_toy_moe(&data, &tc).unwrap());
}

#[test]
fn trainer_learns_two_behavior_task() {
    let spec = CircuitSpec::rotating(1, 4, 1).unwrap();
    let as_pairs = |seed| -> Vec<(Vec<usize>, usize)> {
        behavior_prompts(&spec, 100, seed)
            .into_iter()
            .map(|p| (p.tokens, p.behavior.output_token()))
            .collect()
    };
    let cfg = MoEConfig {
        num_layers: 1,
        experts_per_layer: 4,
        top_k: 2,
        hidden_dim: 8,
        expert_hidden_dim: 8,
        num_shared_experts: 0,
        vocab_size: spec.vocab_size(),
        softmax_mode: SoftmaxMode::default(),
        seed: 3,
    };
    let (model, _) = train_toy_moe(
        &as_pairs(1),
        &TrainConfig {
            model: cfg,
            epochs: 8,
            lr: 0.01,
        },
    )
    .unwrap();
    let held_out = as_pairs(2);
    let hits = held_out
        .iter()
        .filter(|(t, y)| model.forward(t, None).unwrap().last_token() == *y)
        .count();
    let acc = hits as f64 / held_out.len() as f64;
    assert!(acc >= 0.9, "held-out accuracy {acc:.3}");
}

#[test]
fn trainer_rejects_empty_dataset() {
    let tc = TrainConfig {
        model: small_config(1, 0),
        epochs: 1,
        lr: 0.01,
    };
    assert!(matches!(train_toy_moe(&[], &tc), Err(Error::Empty(_))));
}

#[test]
fn shared_experts_affect_every_token_without_taking_slots() {
    let mut model = init_model(&small_config(15, 1)).unwrap();
    let tokens = [1, 5, 3, 8];
    let with = model.forward(&tokens, Some(&GateHook::capture())).unwrap();
    for layer in &mut model.layers {
        layer.shared[0].b2 = Array::zeros(&[1, 6]);
        layer.shared[0].w2 = Array::zeros(&[4, 6]);
    }
    let without = model.forward(&tokens, Some(&GateHook::capture())).unwrap();
    let (cw, cwo) = (with.capture.unwrap(), without.capture.unwrap());
    assert_eq!(cw.pre.shape(), &[4, 2, 5]);
    assert!(cw.selected.iter().all(|&e| e < 5));
    for t in 0..tokens.len() {
        assert_ne!(with.logits.row_slice(t), without.logits.row_slice(t), "token {t}");
        // The first layer sees identical inputs, so its routing is unchanged.
        assert_eq!(cw.selection(t, 0), cwo.selection(t, 0));
    }
}

fn payload_strategy() -> impl Strategy<Value = (Array, Vec<f64>, f64, u64)> {
    (
        prop::collection::vec(-1.0f64..1.0, 2 * 5),
        prop::collection::vec(0.1f64..3.0, 2),
        0.0f64..3.0,
        0u64..1000,
    )
        .prop_map(|(m, s, a, seed)| (Array::matrix(2, 5, m).unwrap(), s, a, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn injection_is_added_before_selection((mask, sigma, alpha, seed) in payload_strategy()) {
        let model = init_model(&small_config(seed, 0)).unwrap();
        let tokens = [1, 4, 2, 7, 3];
        let payload = InjectionPayload::Additive { mask: mask.clone(), sigma: sigma.clone(), alpha };
        let cap = model.forward(&tokens, Some(&GateHook::both(payload))).unwrap().capture.unwrap();
        let post = cap.post.as_ref().unwrap();
        for t in 0..tokens.len() {
            for l in 0..2 {
                let pre = cap.pre_logits(t, l);
                let at = (t * 2 + l) * 5;
                let row = &post.data()[at..at + 5];
                for e in 0..5 {
                    prop_assert_eq!(row[e], pre[e] + alpha * (sigma[l] * mask.at(l, e)));
                }
                prop_assert_eq!(cap.selection(t, l), &reference_top_k(row, 2)[..]);
            }
        }
    }

    #[test]
    fn zero_mask_or_zero_alpha_is_bit_identical((mask, sigma, alpha, seed) in payload_strategy()) {
        let model = init_model(&small_config(seed, 1)).unwrap();
        let tokens = [2, 2, 6, 0];
        let base = model.forward(&tokens, None).unwrap();
        let zero_alpha = InjectionPayload::Additive { mask, sigma: sigma.clone(), alpha: 0.0 };
        let zero_mask = InjectionPayload::Additive { mask: Array::zeros(&[2, 5]), sigma, alpha };
        for p in [zero_alpha, zero_mask] {
            let out = model.forward(&tokens, Some(&GateHook::inject(p))).unwrap();
            prop_assert_eq!(&out.logits, &base.logits);
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index(raw in prop::collection::vec(0i32..4, 2..9), k_seed in 0usize..8) {
        let logits: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let k = 1 + k_seed % logits.len();
        for mode in [SoftmaxMode::SoftmaxTopkRenormalize, SoftmaxMode::TopkSoftmax] {
            let s = top_k_select(&logits, k, mode).unwrap();
            prop_assert_eq!(&s.indices, &reference_top_k(&logits, k));
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.weights.iter().all(|&w| w > 0.0));
        }
    }
}
