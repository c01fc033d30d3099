//! Encoder contracts: output widths, determinism, frame-permutation
//! behaviour, the mel front end against a naive DFT, and finite-difference
//! gradient checks through every encoder.

use std::f64::consts::PI;

use mmfd_core::datagen::representable_bands;
use mmfd_core::encoders::mel::{band_center_hz, hann, mel_filterbank, MEL_FLOOR};
use mmfd_core::encoders::{
    mel_spectrogram, ClipEncoder, FeatureSequence, FrameEncoder, MelConfig, MelFrames, Modality, SocialEncoder,
    TextEncoder, VggEncoder, W2vEncoder,
};
use mmfd_core::fusion::ModelConfig;
use mmfd_core::gradcheck::grad_check_named;
use mmfd_core::nn::{Init, ParamStore, Session, TransformerBlock};
use mmfd_core::{Graph, Result, Tensor, Var};

fn cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 8,
        text_layers: 1,
        social_layers: 1,
        w2v_layers: 1,
        vgg_channels: 2,
        w2v_channels: 3,
        frame_channels: 2,
        clip_channels: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn wave(len: usize, salt: f64) -> Vec<f64> {
    (0..len).map(|i| ((i as f64 + salt) * 0.61).sin() * 0.8).collect()
}

fn frames(n: usize, salt: f64) -> Tensor {
    let c = cfg().frame;
    let len = n * c.height * c.width * c.channels;
    let data = (0..len).map(|i| (i as f64 * 0.37 + salt).cos()).collect();
    Tensor::new(vec![n, c.height, c.width, c.channels], data).unwrap()
}

fn mel(n_frames: usize) -> MelFrames {
    let m = cfg().mel;
    mel_spectrogram(&wave(m.window + (n_frames - 1) * m.hop, 0.3), &m).unwrap()
}

/// Runs `f` once in a fresh session and returns the output value.
fn run(store: &ParamStore, f: impl Fn(&mut Session) -> Result<FeatureSequence>) -> Tensor {
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, store);
    let out = f(&mut s).unwrap();
    assert_eq!(s.graph.shape(out.features)[0], out.length);
    s.graph.value(out.features).clone()
}

/// Finite-difference check of every encoder parameter under a projected-sum
/// loss.
fn grad_check_encoder(store: &ParamStore, f: impl Fn(&mut Session) -> Result<FeatureSequence>) -> f64 {
    let mut named: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    grad_check_named(
        |g: &mut Graph, vars: &[Var]| {
            let mut s = Session::prebound(g, store, vars);
            let out = f(&mut s)?;
            let shape = s.graph.shape(out.features).to_vec();
            let n: usize = shape.iter().product();
            let r = s.graph.constant(Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect())?);
            let m = s.graph.mul(out.features, r)?;
            Ok(s.graph.sum(m))
        },
        &mut named,
        1e-6,
    )
    .unwrap()
    .max_rel_err
}

#[test]
fn every_encoder_emits_d_model_columns_deterministically() {
    let c = cfg();
    let mut store = ParamStore::new();
    let (text, social, vgg, w2v, frame, clip) = {
        let mut init = Init::new(&mut store, 5);
        (
            TextEncoder::new(&mut init, "text", Modality::Text, &c, 1),
            SocialEncoder::new(&mut init, &c),
            VggEncoder::new(&mut init, &c),
            W2vEncoder::new(&mut init, &c),
            FrameEncoder::new(&mut init, &c),
            ClipEncoder::new(&mut init, &c),
        )
    };
    let m = mel(4);
    let w = wave(256, 0.0);
    let v = frames(6, 0.0);
    let outputs: Vec<Box<dyn Fn(&mut Session) -> Result<FeatureSequence>>> = vec![
        Box::new(|s| text.encode(s, &[3, 17, 40, 2])),
        Box::new(|s| social.encode(s, &[210, 220], &[230]).map(|p| p.0)),
        Box::new(|s| social.encode(s, &[210, 220], &[230]).map(|p| p.1)),
        Box::new(|s| vgg.encode(s, &m)),
        Box::new(|s| w2v.encode(s, &w)),
        Box::new(|s| frame.encode(s, &v)),
        Box::new(|s| clip.encode(s, &v)),
    ];
    for f in &outputs {
        let a = run(&store, f);
        let b = run(&store, f);
        assert_eq!(a.shape()[1], c.d_model);
        assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn frame_encoder_commutes_with_frame_permutation() {
    let c = cfg();
    let mut store = ParamStore::new();
    let enc = FrameEncoder::new(&mut Init::new(&mut store, 9), &c);
    let v = frames(5, 1.0);
    let per = v.numel() / 5;
    let perm = [3, 0, 4, 2, 1];
    let mut shuffled = Vec::with_capacity(v.numel());
    for &p in &perm {
        shuffled.extend_from_slice(&v.data()[p * per..(p + 1) * per]);
    }
    let pv = Tensor::new(v.shape().to_vec(), shuffled).unwrap();
    let a = run(&store, |s| enc.encode(s, &v));
    let b = run(&store, |s| enc.encode(s, &pv));
    for (k, &p) in perm.iter().enumerate() {
        for (x, y) in b.row(k).iter().zip(a.row(p)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn w2v_outputs_depend_on_the_parameter_seed() {
    let c = cfg();
    let w = wave(256, 2.0);
    let out = |seed| {
        let mut store = ParamStore::new();
        let enc = W2vEncoder::new(&mut Init::new(&mut store, seed), &c);
        run(&store, |s| enc.encode(s, &w))
    };
    assert_ne!(out(1), out(2));
}

/// Magnitude spectrum by the textbook O(n²) DFT.
fn naive_dft_magnitude(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn naive_log_mel(wave: &[f64], cfg: &MelConfig) -> Vec<Vec<f64>> {
    let win = hann(cfg.window);
    let bank = mel_filterbank(cfg);
    let frames = (wave.len() - cfg.window) / cfg.hop + 1;
    (0..frames)
        .map(|f| {
            let seg: Vec<f64> = (0..cfg.window).map(|i| wave[f * cfg.hop + i] * win[i]).collect();
            let mag = naive_dft_magnitude(&seg);
            bank.iter()
                .map(|filt| filt.iter().zip(&mag).map(|(a, b)| a * b).sum::<f64>().max(MEL_FLOOR).ln())
                .collect()
        })
        .collect()
}

#[test]
fn mel_matches_naive_dft_and_tones_land_in_their_band() {
    let cfg = MelConfig::default();
    let bands = representable_bands(&cfg).unwrap();
    assert!(bands.len() >= 4);
    for &j in &bands {
        let f0 = band_center_hz(&cfg, j);
        let wave: Vec<f64> = (0..cfg.window + 5 * cfg.hop)
            .map(|i| (2.0 * PI * f0 * i as f64 / cfg.sample_rate + 0.4).sin())
            .collect();
        let fast = mel_spectrogram(&wave, &cfg).unwrap();
        let slow = naive_log_mel(&wave, &cfg);
        assert_eq!(fast.n_frames(), slow.len());
        for (t, row) in slow.iter().enumerate() {
            for (a, b) in fast.frames.row(t).iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "band {j} frame {t}: {a} vs {b}");
            }
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, j, "tone at {f0:.1} Hz peaks in band {arg}");
        }
    }
}

#[test]
fn gradients_flow_through_every_encoder() {
    let m3 = mel(3);
    let w = wave(96, 0.7);
    let v2 = frames(2, 0.2);
    let v4 = frames(4, 0.5);
    type Build = Box<dyn Fn(&mut Init) -> Box<dyn Fn(&mut Session) -> Result<FeatureSequence>>>;
    let cases: Vec<(&str, Build)> = vec![
        ("text", Box::new(|init| {
            let e = TextEncoder::new(init, "text", Modality::Text, &cfg(), 1);
            Box::new(move |s| e.encode(s, &[4, 9, 30]))
        })),
        ("social", Box::new(|init| {
            let e = SocialEncoder::new(init, &cfg());
            Box::new(move |s| {
                let (u, m) = e.encode(s, &[210, 211], &[250, 212])?;
                let both = s.graph.concat_rows(&[u.features, m.features])?;
                Ok(FeatureSequence { features: both, length: u.length + m.length, ..u })
            })
        })),
        ("vgg, 3 frames", Box::new(move |init| {
            let e = VggEncoder::new(init, &cfg());
            let m = m3.clone();
            Box::new(move |s| e.encode(s, &m))
        })),
        ("w2v", Box::new(move |init| {
            let e = W2vEncoder::new(init, &cfg());
            let w = w.clone();
            Box::new(move |s| e.encode(s, &w))
        })),
        ("frame, 2 frames", Box::new(move |init| {
            let e = FrameEncoder::new(init, &cfg());
            let v = v2.clone();
            Box::new(move |s| e.encode(s, &v))
        })),
        ("clip", Box::new(move |init| {
            let e = ClipEncoder::new(init, &cfg());
            let v = v4.clone();
            Box::new(move |s| e.encode(s, &v))
        })),
    ];
    for (name, build) in cases {
        let mut store = ParamStore::new();
        let f = build(&mut Init::new(&mut store, 11));
        let err = grad_check_encoder(&store, f);
        assert!(err < 1e-4, "{name}: max_rel_err {err}");
    }
}

/// With `W_q = W_k = 0` every logit is zero, the softmax is uniform and, with
/// identity value and output maps, each attended row is the mean of the keys.
#[test]
fn zero_query_key_weights_give_mean_of_memory() {
    let d = 4;
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut Init::new(&mut store, 1), "b", d, 1, 8);
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    for (name, value) in [("b.wq", Tensor::zeros(&[d, d])), ("b.wk", Tensor::zeros(&[d, d]))] {
        store.set(name, value).unwrap();
    }
    for name in ["b.wv", "b.wo"] {
        store.set(name, Tensor::new(vec![d, d], eye.clone()).unwrap()).unwrap();
    }
    for lkv in [1usize, 3, 6] {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        let mem_t = Tensor::new(vec![lkv, d], (0..lkv * d).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
        let mem = s.graph.constant(mem_t.clone());
        let q = s.graph.constant(Tensor::full(&[2, d], 0.5));
        let out = block.forward(&mut s, q, mem).unwrap();
        let att = s.graph.value(out.attended);
        for r in 0..2 {
            for col in 0..d {
                let mean = (0..lkv).map(|k| mem_t.row(k)[col]).sum::<f64>() / lkv as f64;
                assert!((att.row(r)[col] - mean).abs() < 1e-12);
            }
        }
    }
}
