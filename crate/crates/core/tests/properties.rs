use proptest::prelude::*;

use mta_lab::autodiff::{softmax_t, Graph};
use mta_lab::data::TaskSuite;
use mta_lab::eval::{lcs_len, rouge_l};
use mta_lab::mta::{init_task_weights, Stage};
use mta_lab::optim::{Adam, AdamConfig};
use mta_lab::transformer::{Model, ModelConfig};
use mta_lab::{ParamStore, Tensor};

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subseq(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn small_model(seed: u64, top_k: usize) -> Model {
    let mut cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        mta_layer_indices: vec![0],
        ..ModelConfig::default()
    };
    cfg.mta.top_k = top_k;
    Model::build(cfg, seed).unwrap()
}

fn input_ids(words: &[usize]) -> Vec<usize> {
    let mut ids = vec![1];
    ids.extend(words);
    ids
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f64..30.0, 1..12), t in 0.05f64..5.0) {
        let p = softmax_t(&v, t).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ignores_shifts(v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0, t in 0.05f64..5.0) {
        let p = softmax_t(&v, t).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax_t(&shifted, t).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn largest_weight_shrinks_as_temperature_rises(v in prop::collection::vec(-5.0f64..5.0, 2..8), t in 0.05f64..4.0, dt in 0.01f64..4.0) {
        let top = v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
        let cold = softmax_t(&v, t).unwrap()[top];
        let warm = softmax_t(&v, t + dt).unwrap()[top];
        prop_assert!(warm <= cold + 1e-12);
    }

    #[test]
    fn graph_softmax_matches_kernel(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..5), t in 0.1f64..3.0) {
        let mut g = Graph::detached();
        let x = g.input(Tensor::from_rows(&rows).unwrap());
        let y = g.softmax_rows(x, t, None).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let expect = softmax_t(r, t).unwrap();
            for (a, b) in g.value(y).row(i).iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lcs_matches_brute_force(a in prop::collection::vec(0u8..4, 0..10), b in prop::collection::vec(0u8..4, 0..10)) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn rouge_is_symmetric_and_bounded(a in prop::collection::vec(0u8..5, 0..15), b in prop::collection::vec(0u8..5, 0..15)) {
        let ab = rouge_l(&a, &b);
        prop_assert_eq!(ab.to_bits(), rouge_l(&b, &a).to_bits());
        prop_assert!((0.0..=100.0).contains(&ab));
    }

    #[test]
    fn rouge_of_identical_sequences_is_100(a in prop::collection::vec(0u8..5, 1..20)) {
        prop_assert_eq!(rouge_l(&a, &a), 100.0);
    }

    #[test]
    fn deleting_a_token_never_lengthens_the_lcs(a in prop::collection::vec(0u8..4, 1..12), b in prop::collection::vec(0u8..4, 0..12), pick in any::<prop::sample::Index>()) {
        let mut shorter = a.clone();
        shorter.remove(pick.index(a.len()));
        let before = lcs_len(&a, &b);
        let after = lcs_len(&shorter, &b);
        prop_assert!(after <= before && before <= after + 1);
    }

    #[test]
    fn tokenizer_round_trips(picks in prop::collection::vec(any::<prop::sample::Index>(), 0..20)) {
        let tok = TaskSuite::default().tokenizer;
        let words: Vec<&str> = picks.iter().map(|i| tok.words()[i.index(tok.vocab_size())].as_str()).collect();
        let text = words.join(" ");
        let ids = tok.encode(&text).unwrap();
        prop_assert_eq!(ids.len(), words.len());
        prop_assert_eq!(tok.decode(&ids), text);
    }

    #[test]
    fn init_matches_closed_form(n in 1usize..10, tasks in 1usize..6, lambda in 0.0f64..4.0, seed in any::<u64>()) {
        let designated: Vec<usize> = (0..tasks).map(|i| (seed as usize).wrapping_add(i * 7) % n).collect();
        let w = init_task_weights(tasks, n, lambda, &designated).unwrap();
        prop_assert_eq!(w.shape(), &[tasks, n][..]);
        let nf = n as f64;
        for (i, &d) in designated.iter().enumerate() {
            for j in 0..n {
                let expect = if j == d { (1.0 + lambda) / nf } else { 1.0 / nf };
                prop_assert_eq!(w.row(i)[j].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn adam_never_touches_frozen_parameters(frozen in prop::collection::vec(any::<bool>(), 4), steps in 1usize..6, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        for (i, &f) in frozen.iter().enumerate() {
            store.init_normal(&format!("p{i}"), &[3, 2], 1.0, seed.wrapping_add(i as u64)).unwrap();
            store.set_trainable(&format!("p{i}"), !f).unwrap();
        }
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1)).unwrap();
        for _ in 0..steps {
            for (_, p) in store.iter_mut() {
                p.grad = Tensor::full(p.value.shape(), 1.0);
            }
            adam.step(&mut store);
        }
        for (i, &f) in frozen.iter().enumerate() {
            let name = format!("p{i}");
            let same = store.value(&name).unwrap().bit_eq(before.value(&name).unwrap());
            prop_assert_eq!(same, f);
            prop_assert_eq!(adam.has_state(&name), !f);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn batched_decoding_matches_one_at_a_time(
        seqs in prop::collection::vec((prop::collection::vec(3usize..120, 1..12), 0usize..3), 1..5),
        seed in 0u64..1000,
        promote in any::<bool>(),
    ) {
        let mut model = small_model(seed, 2);
        let stage = if promote {
            model.promote_to_stage2(seed).unwrap();
            Stage::Two
        } else {
            Stage::One
        };
        let ids: Vec<Vec<usize>> = seqs.iter().map(|(w, _)| input_ids(w)).collect();
        let inputs: Vec<(&[usize], usize)> = ids.iter().zip(&seqs).map(|(i, (_, t))| (i.as_slice(), *t)).collect();
        let batched = model.greedy_decode_batch(&inputs, stage, 6).unwrap();
        for ((i, t), out) in inputs.iter().zip(&batched) {
            prop_assert_eq!(&model.greedy_decode(i, *t, stage, 6).unwrap(), out);
        }
    }

    #[test]
    fn gates_stay_in_the_unit_interval(words in prop::collection::vec(3usize..120, 1..20), task in 0usize..3, seed in 0u64..1000) {
        let mut model = small_model(seed, 1);
        model.promote_to_stage2(seed).unwrap();
        let ids = input_ids(&words);
        for (_, gates) in model.gate_values(&[(&ids, task)]).unwrap() {
            prop_assert!(gates.data().iter().all(|g| (0.0..=1.0).contains(g)));
        }
    }

    #[test]
    fn encoding_other_sequences_alongside_changes_nothing(
        a in prop::collection::vec(3usize..120, 1..10),
        b in prop::collection::vec(3usize..120, 1..10),
        seed in 0u64..1000,
    ) {
        let model = small_model(seed, 2);
        let (ia, ib) = (input_ids(&a), input_ids(&b));
        let alone = model.greedy_decode_batch(&[(&ia, 0)], Stage::One, 4).unwrap();
        let packed = model.greedy_decode_batch(&[(&ib, 2), (&ia, 0)], Stage::One, 4).unwrap();
        prop_assert_eq!(&alone[0], &packed[1]);
    }
}
