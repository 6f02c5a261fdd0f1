mod common;

use common::{gaussian_matrix, random_params, setup};
use ndarray::Array2;
use proptest::prelude::*;
use recall_core::activation::Activation;
use recall_core::diagnostics::{decompose_scores, split_value_first_step};
use recall_core::embed::EmbeddingSet;
use recall_core::harness::{fit_loglog_slope, ResultRow, ResultTable};
use recall_core::model::{attn_output, forward, logits, predict, LayerNormConfig, ModelParams};
use recall_core::rng::rng_from_seed;
use recall_core::taskgen::*;
use recall_core::trainer::{adam_train, grad, three_step_train, AdamHyper, ThreeStepHyper};

fn ln_off() -> LayerNormConfig {
    LayerNormConfig::disabled()
}

fn small_setup() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (2usize..12, 1usize..7, 1usize..7, prop_oneof![Just(0usize), 1usize..9], any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn labels_match_permutation_and_replay((v, l, _, _, seed) in small_setup(), n in 1usize..40) {
        let cfg = TaskConfig::new(v, l, n, 1, 0).with_seed(seed);
        let a = build_task(&cfg, false).unwrap();
        let b = build_task(&cfg, false).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        for (i, ex) in a.examples.iter().enumerate() {
            prop_assert_eq!(ex.label, a.perm.apply(ex.tokens[ex.informative_pos]));
            prop_assert!(ex.informative_pos < l);
            prop_assert_eq!(&regenerate_example(&cfg, &a.perm, a.seed, i).unwrap(), ex);
        }
    }

    #[test]
    fn permutation_inverse_composes_to_identity(v in 2usize..64, seed in any::<u64>()) {
        let p = sample_permutation(v, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(p.compose(&p.inverse()), Permutation::identity(v));
        prop_assert_eq!(p.inverse().compose(&p), Permutation::identity(v));
    }

    #[test]
    fn hermite_round_trip(coeffs in prop::collection::vec(-3.0f64..3.0, 1..9)) {
        let act = Activation::from_monomial(&coeffs).unwrap();
        let back = Activation::from_hermite(act.hermite_coeffs()).unwrap();
        for (a, b) in act.coeffs().iter().zip(back.coeffs()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn outputs_are_invariant_to_position_order((v, l, d, m, seed) in small_setup(), shift in 0usize..7) {
        let s = setup(v, l, 3, d, m, seed);
        let p = random_params(&s, seed);
        for ex in &s.data.examples {
            let mut rotated = ex.clone();
            rotated.tokens.rotate_left(shift % l);
            rotated.informative_pos = (ex.informative_pos + l - shift % l) % l;
            prop_assert_eq!(rotated.informative_token(), ex.informative_token());
            prop_assert_eq!(attn_output(ex, &p.key_query, &s.emb).unwrap(), attn_output(&rotated, &p.key_query, &s.emb).unwrap());
            prop_assert_eq!(forward(ex, &p, &s.emb, s.act.as_ref(), &ln_off()).unwrap(), forward(&rotated, &p, &s.emb, s.act.as_ref(), &ln_off()).unwrap());
            prop_assert_eq!(predict(ex, &p, &s.emb, s.act.as_ref(), &ln_off()).unwrap(), predict(&rotated, &p, &s.emb, s.act.as_ref(), &ln_off()).unwrap());
        }
    }

    #[test]
    fn predictions_follow_vocabulary_relabeling((v, l, d, m, seed) in small_setup(), tau_seed in any::<u64>()) {
        let s = setup(v, l, 4, d, m, seed);
        let p = random_params(&s, seed);
        let tau = sample_permutation(v, &mut rng_from_seed(tau_seed)).unwrap();
        let relabel_rows = |rows: &Array2<f64>| {
            let mut out = rows.clone();
            for t in 0..v as TokenId {
                out.row_mut(tau.apply(t) as usize).assign(&rows.row(t as usize));
            }
            out
        };
        let emb = EmbeddingSet::from_parts(
            relabel_rows(s.emb.token_in_rows()),
            relabel_rows(s.emb.token_out_rows()),
            s.emb.z_trig().clone(),
            s.emb.z_eos().clone(),
            s.emb.w_in().cloned(),
        ).unwrap();
        for ex in &s.data.examples {
            let moved = Example {
                tokens: ex.tokens.iter().map(|&t| tau.apply(t)).collect(),
                informative_pos: ex.informative_pos,
                label: tau.apply(ex.label),
            };
            let before = logits(ex, &p, &s.emb, s.act.as_ref(), &ln_off()).unwrap();
            let after = logits(&moved, &p, &emb, s.act.as_ref(), &ln_off()).unwrap();
            for t in 0..v as TokenId {
                prop_assert!((before[t as usize] - after[tau.apply(t) as usize]).abs() <= 1e-12 * (1.0 + before[t as usize].abs()));
            }
            let gap = {
                let mut sorted: Vec<f64> = before.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                if v > 1 { sorted[0] - sorted[1] } else { 1.0 }
            };
            if gap > 1e-9 {
                let old = predict(ex, &p, &s.emb, s.act.as_ref(), &ln_off()).unwrap();
                prop_assert_eq!(predict(&moved, &p, &emb, s.act.as_ref(), &ln_off()).unwrap(), tau.apply(old));
            }
        }
    }

    #[test]
    fn softmax_ignores_constant_logit_shifts((v, l, d, _, seed) in small_setup(), c in 0.0f64..50.0) {
        // A common extra component in every output embedding shifts all logits equally.
        let s = setup(v, l, 3, d, 0, seed);
        let p = random_params(&s, seed);
        let e = gaussian_matrix(1, d, c.sqrt() / (d as f64).sqrt(), seed ^ 9).row(0).to_owned();
        let mut z_out = s.emb.token_out_rows().clone();
        for mut r in z_out.outer_iter_mut() {
            r += &e;
        }
        let shifted = EmbeddingSet::from_parts(s.emb.token_in_rows().clone(), z_out, s.emb.z_trig().clone(), s.emb.z_eos().clone(), None).unwrap();
        for ex in &s.data.examples {
            let a = forward(ex, &p, &s.emb, None, &ln_off()).unwrap();
            let b = forward(ex, &p, &shifted, None, &ln_off()).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities((v, l, d, m, seed) in small_setup()) {
        let s = setup(v, l, 3, d, m, seed);
        let zero = ModelParams::zeros_for(&s.emb);
        for ex in &s.data.examples {
            let pv = forward(ex, &zero, &s.emb, s.act.as_ref(), &ln_off()).unwrap();
            prop_assert!(pv.probs.iter().all(|&q| q == 1.0 / v as f64));
            prop_assert_eq!(predict(ex, &zero, &s.emb, s.act.as_ref(), &ln_off()).unwrap(), 0);
        }
    }

    #[test]
    fn probabilities_sum_to_one((v, l, d, m, seed) in small_setup()) {
        let s = setup(v, l, 4, d, m, seed);
        let p = random_params(&s, seed);
        for ex in &s.data.examples {
            let pv = forward(ex, &p, &s.emb, s.act.as_ref(), &ln_off()).unwrap();
            prop_assert!((pv.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(pv.probs.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients((v, l, d, m, seed) in small_setup(), n in 1usize..12) {
        let s = setup(v, l, n, d, m, seed);
        let p = random_params(&s, seed);
        let g = grad(&p, &s.data.examples, &s.emb, s.act.as_ref(), &ln_off()).unwrap();
        let mut gv = Array2::<f64>::zeros(g.g_value.dim());
        let mut gk = Array2::<f64>::zeros(g.g_key_query.dim());
        for ex in &s.data.examples {
            let gi = grad(&p, std::slice::from_ref(ex), &s.emb, s.act.as_ref(), &ln_off()).unwrap();
            gv += &gi.g_value;
            gk += &gi.g_key_query;
        }
        let nf = n as f64;
        for (a, b) in g.g_value.iter().zip(gv.iter()).chain(g.g_key_query.iter().zip(gk.iter())) {
            prop_assert!((a - b / nf).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn adam_is_deterministic((v, l, d, _, seed) in small_setup()) {
        let s = setup(v, l, 8, d, 0, seed);
        let hyper = AdamHyper { epochs: 3, ..AdamHyper::defaults_for(8, seed) };
        let run = |k: u64| adam_train(&s.data, &s.emb, None, &LayerNormConfig::attention_output(), &hyper, Arch::AttentionOnly, 20, &mut rng_from_seed(k)).unwrap();
        let (a, b) = (run(5), run(5));
        prop_assert_eq!(&a.final_params, &b.final_params);
        let acc = |r: &recall_core::trainer::AdamRun| r.snapshots.iter().map(|x| x.accuracy.accuracy).collect::<Vec<_>>();
        prop_assert_eq!(acc(&a), acc(&b));
    }

    #[test]
    fn decompositions_reconstruct((v, l, d, m, seed) in small_setup(), n in 4usize..30) {
        let s = setup(v, l, n, d, m, seed);
        let run = three_step_train(&s.data, &s.emb, s.act.as_ref(), &ThreeStepHyper::fixed(0.05, 2.0), s.cfg.arch()).unwrap();
        if m == 0 {
            let split = split_value_first_step(&s.data, &s.emb, 0.05, Arch::AttentionOnly).unwrap();
            prop_assert!(split.reconstruction_error() <= 1e-12);
        }
        let fresh = sample_fresh(&s.cfg, &s.data.perm, 2, seed ^ 3).unwrap();
        for ex in &fresh {
            let dec = decompose_scores(ex, &run.trace, &s.data, &s.emb, s.act.as_ref()).unwrap();
            let scale = dec.scores.iter().fold(1.0f64, |a, x| a.max((x / dec.normalizer).abs()));
            prop_assert!(dec.identity_error() <= 1e-10 * scale);
            if m == 0 {
                prop_assert!(dec.s3.iter().all(|&x| x == 0.0));
            }
            for (pos, &x) in dec.informative.iter().enumerate() {
                if pos != ex.informative_pos {
                    prop_assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn exact_power_laws_are_recovered(slope in -3.0f64..3.0, scale in 0.1f64..10.0, x0 in 1.0f64..10.0) {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| {
            let x = x0 * 3f64.powi(k);
            (x, scale * x.powf(slope))
        }).collect();
        let f = fit_loglog_slope(&pts).unwrap();
        prop_assert!((f.slope - slope).abs() <= 1e-12);
        prop_assert_eq!(f.stderr_slope, 0.0);
    }

    #[test]
    fn result_csv_round_trips(acc in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..6), seed in any::<u64>()) {
        let rows: Vec<ResultRow> = acc.iter().enumerate().map(|(k, &a)| ResultRow {
            v: 16 + k, l: 4, n: 50, d: 3, m: 0, seed, trainer: "adam".into(), epoch: Some(k + 1),
            accuracy: a, stderr: a.map(|x| (x * (1.0 - x) / 100.0).sqrt()), wallclock_s: 0.0,
            eta: Some(0.005), gamma: None,
        }).collect();
        let t = ResultTable { rows };
        prop_assert_eq!(ResultTable::from_csv(&t.to_csv()).unwrap(), t);
    }
}
