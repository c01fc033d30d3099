//! End-to-end model properties: gradient correctness, modality gating,
//! attention normalisation and argmax invariance.

use mmfd_core::datagen::{generate_corpus, CorpusSpec, MultimodalSample};
use mmfd_core::encoders::{FeatureSequence, Modality};
use mmfd_core::fusion::{argmax2, cross_attention, AudioEncoderKind, ModalitySet, Model, ModelConfig};
use mmfd_core::nn::{Init, ParamStore, Session, TransformerBlock};
use mmfd_core::train::grad_check_model;
use mmfd_core::{Graph, Tensor};
use proptest::prelude::*;

fn samples(n: usize, seed: u64) -> Vec<MultimodalSample> {
    generate_corpus(&CorpusSpec {
        n_samples: n,
        seed,
        ..CorpusSpec::default()
    })
    .unwrap()
    .samples
}

fn mask_strategy() -> impl Strategy<Value = (ModalitySet, AudioEncoderKind)> {
    (1u8..16, any::<bool>()).prop_map(|(bits, vgg)| {
        let m = ModalitySet {
            audio: bits & 1 != 0,
            text: bits & 2 != 0,
            video: bits & 4 != 0,
            social: bits & 8 != 0,
        };
        let enc = match (m.audio, vgg) {
            (false, _) => AudioEncoderKind::None,
            (true, true) => AudioEncoderKind::Vgg,
            (true, false) => AudioEncoderKind::W2v,
        };
        (m, enc)
    })
}

#[test]
fn minimal_model_passes_grad_check_on_two_samples() {
    let model = Model::new(ModelConfig::minimal()).unwrap();
    let report = grad_check_model(&model, &samples(2, 3), 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
    assert_eq!(report.checked, model.params().tensors().iter().map(Tensor::numel).sum::<usize>());
}

/// Replaces the payload of every group that `mask` leaves out.
fn perturb_disabled(s: &MultimodalSample, mask: ModalitySet, salt: u64) -> MultimodalSample {
    let mut t = s.clone();
    let tok = |i: usize| 1 + ((i as u64 * 31 + salt) % 250) as u32;
    if !mask.text {
        t.text_tokens = (0..s.text_tokens.len() + 3).map(tok).collect();
    }
    if !mask.audio {
        t.waveform = s.waveform.iter().enumerate().map(|(i, v)| -v + (i as f64 + salt as f64).sin()).collect();
    }
    if !mask.video {
        let f = s.frames.as_ref().unwrap();
        t.frames = Some(f.map(|v| 1.0 - v + salt as f64 * 0.01));
    }
    if !mask.social {
        t.user_tokens = (0..5).map(|i| tok(i + 7)).collect();
        t.comment_tokens = (0..9).map(|i| tok(i + 13)).collect();
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn disabled_modalities_never_affect_logits((mask, enc) in mask_strategy(), seed in 0u64..1000, salt in any::<u64>()) {
        let cfg = ModelConfig { seed, ..ModelConfig::minimal() }.with_modalities(mask, enc);
        let model = Model::new(cfg).unwrap();
        let s = &samples(1, seed)[0];
        let a = model.logits(s).unwrap();
        let b = model.logits(&perturb_disabled(s, mask, salt)).unwrap();
        prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }

    #[test]
    fn every_attention_map_is_row_stochastic((mask, enc) in mask_strategy(), seed in 0u64..1000) {
        let cfg = ModelConfig { seed, n_heads: 2, ..ModelConfig::minimal() }.with_modalities(mask, enc);
        let model = Model::new(cfg).unwrap();
        let s = &samples(1, seed)[0];
        let mut g = Graph::new();
        let mut sess = model.session(&mut g, None);
        let trace = model.forward(&mut sess, s).unwrap();
        prop_assert!(!trace.attention.is_empty());
        for (stage, w) in &trace.attention {
            let w = sess.graph.value(*w);
            let cols = *w.shape().last().unwrap();
            for row in w.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{}", stage);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn cross_attention_output_has_query_length(lq in 1usize..12, lkv in 1usize..12, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let d = 8;
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut Init::new(&mut store, 7), "x", d, heads, 16);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let mk = |s: &mut Session, rows: usize, salt: f64, modality| FeatureSequence {
            modality,
            features: s.graph.constant(Tensor::new(vec![rows, d], (0..rows * d).map(|i| (i as f64 * 0.3 + salt).sin()).collect()).unwrap()),
            length: rows,
        };
        let q = mk(&mut s, lq, 0.0, Modality::Text);
        let kv = mk(&mut s, lkv, 1.0, Modality::Audio);
        let out = cross_attention(&mut s, std::slice::from_ref(&block), q, kv).unwrap();
        prop_assert_eq!(out.seq.length, lq);
        prop_assert_eq!(s.graph.shape(out.seq.features), &[lq, d]);
        prop_assert_eq!(out.weights.len(), heads);
        for w in out.weights {
            prop_assert_eq!(s.graph.shape(w), &[lq, lkv]);
        }
    }

    #[test]
    fn prediction_ignores_a_common_logit_offset(a in -1e6f64..1e6, b in -1e6f64..1e6, c in -1e6f64..1e6) {
        prop_assert_eq!(argmax2([a, b]), argmax2([a + c, b + c]));
    }
}

#[test]
fn model_predictions_are_shift_invariant() {
    let model = Model::new(ModelConfig::minimal()).unwrap();
    for s in samples(6, 1) {
        let l = model.logits(&s).unwrap();
        for c in [-3.0, 0.5, 40.0] {
            assert_eq!(argmax2([l[0] + c, l[1] + c]), model.predict(&s).unwrap());
        }
    }
}
