use proptest::prelude::*;
use yunlu_core::audio::{assemble_sequence, AssembledSequence, AudioFeatureTable, UNK};
use yunlu_core::fusion::{DialectFusion, ScaleMode};
use yunlu_core::heads::VisualHead;
use yunlu_core::model::{AblationFlags, Model, ModelConfig, ModelInput};
use yunlu_core::numerics::gradcheck::{finite_diff_grad, worst_rel_error, DEFAULT_STEP, TOLERANCE};
use yunlu_core::{AudioEncoder, Graph, ParamStore, Rng, Tensor};

const D_A: usize = 5;
const VOCAB: usize = 12;

fn table(rng: &mut Rng) -> AudioFeatureTable {
    let tokens = (0..VOCAB).map(|i| format!("t{i}")).chain([UNK.to_string()]).collect();
    AudioFeatureTable::new("m", tokens, rng.normal_tensor(vec![VOCAB + 1, D_A], 1.0)).unwrap()
}

fn sentence(rng: &mut Rng, t: &AudioFeatureTable, n: usize) -> AssembledSequence {
    // A few draws fall outside the vocabulary and hit <unk>.
    let s: Vec<String> = (0..n).map(|_| format!("t{}", rng.below(VOCAB + 2))).collect();
    assemble_sequence(&s, t, 16, false).unwrap()
}

fn encoder(seed: u64) -> (AudioEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let enc = AudioEncoder::new(&mut store, &mut rng, "audio", D_A, 8, 2, 2, 16).unwrap();
    // Non-zero unknown embedding so that <unk> hits matter.
    *store.get_mut(enc.unk) = rng.normal_tensor(vec![1, 8], 0.5);
    (enc, store)
}

fn pooled(enc: &AudioEncoder, store: &ParamStore, seqs: &[AssembledSequence]) -> Tensor {
    let mut g = Graph::new();
    let e = enc.forward(&mut g, store, seqs).unwrap();
    g.value(e.pooled).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_never_changes_pooled_features(seed in 0u64..10_000, n in 1usize..10, others in prop::collection::vec(1usize..14, 1..4)) {
        let (enc, store) = encoder(1);
        let mut rng = Rng::new(seed);
        let t = table(&mut rng);
        let target = sentence(&mut rng, &t, n);
        let solo = pooled(&enc, &store, std::slice::from_ref(&target));
        let mut batch: Vec<_> = others.iter().map(|&m| sentence(&mut rng, &t, m)).collect();
        let pos = rng.below(batch.len() + 1);
        batch.insert(pos, target);
        let all = pooled(&enc, &store, &batch);
        prop_assert_eq!(all.row(pos), solo.row(0));
    }

    #[test]
    fn pooled_feature_is_nearly_invariant_to_batch_order(seed in 0u64..10_000) {
        let (enc, store) = encoder(2);
        let mut rng = Rng::new(seed);
        let t = table(&mut rng);
        let batch: Vec<_> = (0..4).map(|_| { let n = 1 + rng.below(8); sentence(&mut rng, &t, n) }).collect();
        let mut rev = batch.clone();
        rev.reverse();
        let a = pooled(&enc, &store, &batch);
        let b = pooled(&enc, &store, &rev);
        for i in 0..4 {
            for (x, y) in a.row(i).iter().zip(b.row(3 - i)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn swapping_dialects_swaps_attention_outputs(seed in 0u64..10_000) {
        let (enc, mut store) = encoder(3);
        let mut rng = Rng::new(seed);
        let fusion = DialectFusion::new(&mut store, &mut rng, "fusion", 8, ScaleMode::DivideByD).unwrap();
        let ta = table(&mut rng);
        let tb = table(&mut rng);
        let chars: Vec<Vec<String>> = (0..3)
            .map(|_| (0..1 + rng.below(6)).map(|_| format!("t{}", rng.below(VOCAB))).collect())
            .collect();
        let sa: Vec<_> = chars.iter().map(|c| assemble_sequence(c, &ta, 16, true).unwrap()).collect();
        let sb: Vec<_> = chars.iter().map(|c| assemble_sequence(c, &tb, 16, true).unwrap()).collect();
        let mut g = Graph::new();
        let a = enc.forward(&mut g, &store, &sa).unwrap();
        let b = enc.forward(&mut g, &store, &sb).unwrap();
        let (ab_a, ab_b) = fusion.attend_both(&mut g, &store, &a, &b).unwrap();
        let (ba_b, ba_a) = fusion.attend_both(&mut g, &store, &b, &a).unwrap();
        prop_assert!(g.value(ab_a).bit_eq(g.value(ba_a)));
        prop_assert!(g.value(ab_b).bit_eq(g.value(ba_b)));
    }
}

#[test]
fn repeated_sentence_in_one_batch_gives_identical_rows() {
    let (enc, store) = encoder(4);
    let mut rng = Rng::new(5);
    let t = table(&mut rng);
    let s = sentence(&mut rng, &t, 6);
    let other = sentence(&mut rng, &t, 3);
    let p = pooled(&enc, &store, &[s.clone(), other, s]);
    assert_eq!(p.row(0), p.row(2));
}

#[test]
fn unk_embedding_only_touches_unknown_sentences() {
    let (enc, mut store) = encoder(6);
    let mut rng = Rng::new(7);
    let t = table(&mut rng);
    let known = assemble_sequence(&["t1".to_string(), "t2".into()], &t, 16, true).unwrap();
    let unknown = assemble_sequence(&["t1".to_string(), "zz".into()], &t, 16, false).unwrap();
    assert_eq!(unknown.unk_count, 1);
    let before = pooled(&enc, &store, &[known.clone(), unknown.clone()]);
    *store.get_mut(enc.unk) = Tensor::zeros(vec![1, 8]);
    let after = pooled(&enc, &store, &[known, unknown]);
    assert_eq!(before.row(0), after.row(0));
    assert_ne!(before.row(1), after.row(1));
}

#[test]
fn overlong_and_strict_unknown_sentences_are_rejected() {
    let mut rng = Rng::new(8);
    let t = table(&mut rng);
    let long: Vec<String> = (0..17).map(|i| format!("t{}", i % VOCAB)).collect();
    assert!(assemble_sequence(&long, &t, 16, false).is_err());
    assert!(assemble_sequence(&["nope".to_string()], &t, 16, true).is_err());
}

#[test]
fn encoder_gradcheck_through_position_class_and_unknown_embeddings() {
    let (enc, store) = encoder(9);
    let mut rng = Rng::new(10);
    let t = table(&mut rng);
    let seqs = vec![
        assemble_sequence(&["t0".to_string(), "xx".into(), "t3".into()], &t, 16, false).unwrap(),
        assemble_sequence(&["t5".to_string()], &t, 16, false).unwrap(),
    ];
    let w = rng.normal_tensor(vec![2, 8], 1.0);
    let loss = |g: &mut Graph, s: &ParamStore| {
        let e = enc.forward(g, s, &seqs).unwrap();
        g.weighted_sum(e.pooled, &w).unwrap()
    };
    let mut g = Graph::new();
    let l = loss(&mut g, &store);
    let grads = g.backward(l).unwrap();
    for id in [enc.pos, enc.cls, enc.unk, enc.input.w] {
        let analytic = grads.param(id).cloned().unwrap();
        let mut probe_store = store.clone();
        let numeric = finite_diff_grad(
            |p| {
                *probe_store.get_mut(id) = p.clone();
                let mut g = Graph::new();
                let l = loss(&mut g, &probe_store);
                Ok(g.value(l).item())
            },
            store.get(id),
            DEFAULT_STEP,
        )
        .unwrap();
        let err = worst_rel_error(&analytic, &numeric).unwrap();
        assert!(err <= TOLERANCE, "{}: {err:e}", store.name(id));
    }
    // Positions past the longest sentence never receive gradient.
    let pos_grad = grads.param(enc.pos).unwrap();
    assert!(pos_grad.data()[4 * 8..].iter().all(|&v| v == 0.0));
}

#[test]
fn scale_modes_differ_only_in_the_logit_denominator() {
    assert_eq!(ScaleMode::DivideByD.factor(16), 1.0 / 16.0);
    assert_eq!(ScaleMode::DivideBySqrtD.factor(16), 0.25);
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let f = DialectFusion::new(&mut store, &mut rng, "f", 4, ScaleMode::DivideByD).unwrap();
    let q = rng.normal_tensor(vec![3, 4], 1.0);
    let k = rng.normal_tensor(vec![3, 4], 1.0);
    let v = rng.normal_tensor(vec![3, 4], 1.0);
    let run = |f: &DialectFusion| {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = f.cross_attend(&mut g, q, k, v, 1, 3, &[true; 3]).unwrap();
        g.value(o).clone()
    };
    let by_d = run(&f);
    let by_sqrt = run(&DialectFusion { scale: ScaleMode::DivideBySqrtD, ..f.clone() });
    assert!(by_d.max_abs_diff(&by_sqrt) > 0.0);
}

#[test]
fn disabled_branches_feed_zeros_to_the_classifier() {
    let cfg = ModelConfig::tiny();
    let (model, store) = Model::new(cfg.clone(), 3).unwrap();
    let mut rng = Rng::new(4);
    let text = rng.normal_tensor(vec![2, cfg.d_text], 1.0);
    let latents = rng.normal_tensor(vec![2, 2, 8, 8], 1.0);
    let input = ModelInput {
        text: Some(text.clone()),
        latents: Some(latents),
        ..ModelInput::default()
    };
    let text_only = AblationFlags { use_audio: false, use_vision: false, ..AblationFlags::default() };
    let mut g = Graph::new();
    let f = model.features(&mut g, &store, &input, &text_only).unwrap();
    let z = model.logits(&mut g, &store, &f).unwrap();
    let z = g.value(z).clone();

    // Oracle: only the first d_f rows of the classifier weight see any input.
    let mut g = Graph::new();
    let t = g.constant(text);
    let ft = model.text.forward(&mut g, &store, t).unwrap();
    let ft = g.value(ft).clone();
    let w = store.get(model.classifier.w);
    let b = store.get(model.classifier.b);
    for i in 0..2 {
        for c in 0..cfg.classes {
            let mut acc = 0.0;
            for j in 0..cfg.d_f {
                acc += ft.at2(i, j) * w.at2(j, c);
            }
            acc += b.data()[c];
            assert!((z.at2(i, c) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn visual_head_needs_sides_divisible_by_eight() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    assert!(VisualHead::new(&mut store, &mut rng, "v", [4, 12, 16], [2, 2, 2], 4).is_err());
    let head = VisualHead::new(&mut store, &mut rng, "v", [4, 16, 24], [2, 3, 4], 5).unwrap();
    let mut g = Graph::new();
    let x = g.constant(rng.normal_tensor(vec![3, 4, 16, 24], 1.0));
    let y = head.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[3, 5]);
}
