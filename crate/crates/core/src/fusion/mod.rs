//! The fusion network: encoders → text↔audio cross-attention → (text·audio)↔frame
//! cross-attention → per-modality mean pooling → six-slot self-attention with
//! the social features → final transformer block → binary classifier.
//!
//! Slot order in the six-feature sequence is fixed:
//! `[x_t, x_a, x_f, x_c, x_u, x_m]` (text, audio, frame, clip, user, comment).
//! A modality disabled in [`ModelConfig`] contributes a learned placeholder
//! vector to its slots, so the classifier always sees six rows.

mod checkpoint;
mod config;

use std::cell::Cell;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{AttentionReading, AudioEncoderKind, ModalitySet, ModelConfig};

use crate::datagen::MultimodalSample;
use crate::encoders::{
    ClipEncoder, FeatureSequence, FrameEncoder, MelFrontend, Modality, SocialEncoder, TextEncoder, VggEncoder,
    W2vEncoder,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{add_positions, run_stack, Dropout, Init, Linear, ParamId, ParamStore, Session, TransformerBlock};

pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

/// Output of [`cross_attention`].
#[derive(Clone, Debug)]
pub struct CrossOutput {
    pub seq: FeatureSequence,
    /// Attention weights of every head of every stacked block.
    pub weights: Vec<Var>,
}

/// Query sequence attends to `kv`; the result keeps the query's length and
/// modality. Each block is a post-norm transformer layer.
pub fn cross_attention(
    s: &mut Session,
    blocks: &[TransformerBlock],
    query: FeatureSequence,
    kv: FeatureSequence,
) -> Result<CrossOutput> {
    let (features, weights) = run_stack(blocks, s, query.features, Some(kv.features))?;
    Ok(CrossOutput {
        seq: FeatureSequence { features, ..query },
        weights,
    })
}

/// Independent parameters for both directions of one fusion stage.
#[derive(Clone, Debug)]
pub struct CrossPair {
    /// Produces the first output (`F_{x←y}`).
    pub toward_first: Vec<TransformerBlock>,
    /// Produces the second output (`F_{y←x}`).
    pub toward_second: Vec<TransformerBlock>,
}

impl CrossPair {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let stack = |init: &mut Init, dir: &str| {
            (0..cfg.fusion_layers)
                .map(|i| TransformerBlock::new(init, &format!("{name}.{dir}{i}"), cfg.d_model, cfg.n_heads, cfg.ffn_dim))
                .collect()
        };
        Self {
            toward_first: stack(init, "fwd"),
            toward_second: stack(init, "bwd"),
        }
    }

    /// Returns `(F_{x←y}, F_{y←x})`.
    pub fn fuse(
        &self,
        s: &mut Session,
        x: FeatureSequence,
        y: FeatureSequence,
        reading: AttentionReading,
    ) -> Result<(CrossOutput, CrossOutput)> {
        match reading {
            AttentionReading::TargetQueries => Ok((
                cross_attention(s, &self.toward_first, x, y)?,
                cross_attention(s, &self.toward_second, y, x)?,
            )),
            AttentionReading::SourceQueries => Ok((
                cross_attention(s, &self.toward_first, y, x)?,
                cross_attention(s, &self.toward_second, x, y)?,
            )),
        }
    }
}

/// Text ↔ audio: `(F_{t←a}, F_{a←t})`.
pub fn fuse_stage1(
    s: &mut Session,
    pair: &CrossPair,
    text: FeatureSequence,
    audio: FeatureSequence,
    reading: AttentionReading,
) -> Result<(CrossOutput, CrossOutput)> {
    pair.fuse(s, text, audio, reading)
}

/// Audio-enhanced text ↔ frames: `(F_{t←a,f}, F_{f←t})`.
pub fn fuse_stage2(
    s: &mut Session,
    pair: &CrossPair,
    text_audio: FeatureSequence,
    frames: FeatureSequence,
    reading: AttentionReading,
) -> Result<(CrossOutput, CrossOutput)> {
    pair.fuse(s, text_audio, frames, reading)
}

/// Mean over the length axis, `[d_model]`.
pub fn pool_mean(s: &mut Session, seq: &FeatureSequence) -> Result<Var> {
    s.graph.mean_rows(seq.features)
}

/// Output of [`social_self_attention`].
#[derive(Clone, Debug)]
pub struct SocialOutput {
    /// The `[6×d]` enhanced sequence.
    pub seq: Var,
    /// The six enhanced rows in slot order.
    pub rows: Vec<Var>,
    pub weights: Vec<Var>,
}

/// Self-attention over the stacked `[content…, social…]` vectors (four
/// content + two social = six rows).
pub fn social_self_attention(
    s: &mut Session,
    block: &TransformerBlock,
    content: &[Var],
    social: &[Var],
    positions: bool,
) -> Result<SocialOutput> {
    if content.len() + social.len() != 6 {
        return Err(Error::Contract(format!(
            "social self-attention needs six features, got {} content + {} social",
            content.len(),
            social.len()
        )));
    }
    let all: Vec<Var> = content.iter().chain(social).copied().collect();
    let mut x = s.graph.concat_rows(&all)?;
    if positions {
        x = add_positions(s, x)?;
    }
    let out = block.self_attention(s, x)?;
    let rows = (0..6)
        .map(|i| s.graph.slice_rows(out.out, i, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(SocialOutput {
        seq: out.out,
        rows,
        weights: out.weights,
    })
}

/// The six pooled features, in slot order.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    pub x_t: Var,
    pub x_a: Var,
    pub x_f: Var,
    pub x_c: Var,
    pub x_u: Var,
    pub x_m: Var,
}

impl FusedFeatures {
    pub fn slots(&self) -> [Var; 6] {
        [self.x_t, self.x_a, self.x_f, self.x_c, self.x_u, self.x_m]
    }
}

/// Final transformer block over the six-row sequence, mean pool, classifier.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub block: TransformerBlock,
    pub hidden: Option<Linear>,
    pub out: Linear,
}

impl ClassifierHead {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let block = TransformerBlock::new(init, "head.block", cfg.d_model, cfg.n_heads, cfg.ffn_dim);
        let (hidden, d_in) = if cfg.classifier_hidden > 0 {
            (
                Some(Linear::new(init, "head.hidden", cfg.d_model, cfg.classifier_hidden, true)),
                cfg.classifier_hidden,
            )
        } else {
            (None, cfg.d_model)
        };
        let out = Linear::new(init, "head.out", d_in, 2, true);
        Self { block, hidden, out }
    }

    /// Logits `[2]` (index 0 = real, 1 = fake) from a `[6×d]` sequence.
    pub fn classify(&self, s: &mut Session, sequence: Var) -> Result<Var> {
        self.classify_traced(s, sequence).map(|(logits, _)| logits)
    }

    /// [`Self::classify`] plus the head block's attention weights.
    pub fn classify_traced(&self, s: &mut Session, sequence: Var) -> Result<(Var, Vec<Var>)> {
        let o = self.block.self_attention(s, sequence)?;
        let pooled = s.graph.mean_rows(o.out)?;
        let d = s.graph.shape(pooled)[0];
        let mut x = s.graph.reshape(pooled, &[1, d])?;
        if let Some(h) = &self.hidden {
            x = h.forward(s, x)?;
            x = s.graph.gelu(x);
        }
        let logits = self.out.forward(s, x)?;
        Ok((s.graph.reshape(logits, &[2])?, o.weights))
    }
}

pub fn aggregate_classify(s: &mut Session, head: &ClassifierHead, fused: &FusedFeatures) -> Result<Var> {
    let seq = s.graph.concat_rows(&fused.slots())?;
    head.classify(s, seq)
}

#[derive(Clone, Debug)]
pub enum AudioEncoder {
    Vgg(VggEncoder),
    W2v(W2vEncoder),
}

/// How many times each encoder ran; used to verify modality gating.
#[derive(Debug, Default)]
pub struct EncoderCounters {
    pub text: Cell<usize>,
    pub audio: Cell<usize>,
    pub frames: Cell<usize>,
    pub clips: Cell<usize>,
    pub social: Cell<usize>,
}

impl EncoderCounters {
    fn bump(c: &Cell<usize>) {
        c.set(c.get() + 1);
    }
}

/// Everything a forward pass exposes besides the logits.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub fused: FusedFeatures,
    /// `(stage label, head weights)` for every attention map evaluated.
    pub attention: Vec<(&'static str, Var)>,
}

#[derive(Clone, Debug)]
struct FusionNet {
    text: Option<TextEncoder>,
    audio: Option<AudioEncoder>,
    frames: Option<FrameEncoder>,
    clips: Option<ClipEncoder>,
    social: Option<SocialEncoder>,
    stage1: Option<CrossPair>,
    stage2: Option<CrossPair>,
    placeholders: [Option<ParamId>; 6],
    social_block: TransformerBlock,
    head: ClassifierHead,
}

/// Parameters plus the network layout for one [`ModelConfig`].
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: FusionNet,
    mel: MelFrontend,
    pub counters: EncoderCounters,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            net: self.net.clone(),
            mel: MelFrontend::new(self.config.mel.clone()).expect("validated mel config"),
            counters: EncoderCounters::default(),
        }
    }
}

impl Model {
    /// Builds and initialises a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = {
            let mut init = Init::new(&mut params, config.seed);
            FusionNet::new(&mut init, &config)
        };
        Ok(Self {
            mel: MelFrontend::new(config.mel.clone())?,
            config,
            params,
            net,
            counters: EncoderCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn session<'a>(&'a self, graph: &'a mut Graph, dropout: Option<Dropout>) -> Session<'a> {
        Session::new(graph, &self.params).with_dropout(dropout)
    }

    /// Full pipeline on one sample.
    pub fn forward(&self, s: &mut Session, sample: &MultimodalSample) -> Result<ForwardTrace> {
        self.net.forward(s, &self.config, &self.mel, &self.counters, sample)
    }

    /// Evaluation-mode logits `[real, fake]`.
    pub fn logits(&self, sample: &MultimodalSample) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let mut s = self.session(&mut g, None);
        let t = self.forward(&mut s, sample)?;
        let v = s.graph.value(t.logits).data();
        Ok([v[0], v[1]])
    }

    pub fn predict(&self, sample: &MultimodalSample) -> Result<u8> {
        self.logits(sample).map(|l| argmax2(l))
    }
}

/// Class with the larger logit; ties go to real.
pub fn argmax2(logits: [f64; 2]) -> u8 {
    if logits[1] > logits[0] {
        FAKE
    } else {
        REAL
    }
}

const SLOT_NAMES: [&str; 6] = ["text", "audio", "frame", "clip", "user", "comment"];

impl FusionNet {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let m = cfg.modalities;
        let text = m
            .text
            .then(|| TextEncoder::new(init, "text", Modality::Text, cfg, cfg.text_layers));
        let audio = match cfg.audio_encoder {
            AudioEncoderKind::Vgg => Some(AudioEncoder::Vgg(VggEncoder::new(init, cfg))),
            AudioEncoderKind::W2v => Some(AudioEncoder::W2v(W2vEncoder::new(init, cfg))),
            AudioEncoderKind::None => None,
        };
        let frames = m.video.then(|| FrameEncoder::new(init, cfg));
        let clips = m.video.then(|| ClipEncoder::new(init, cfg));
        let social = m.social.then(|| SocialEncoder::new(init, cfg));
        let stage1 = (m.text && m.audio).then(|| CrossPair::new(init, "stage1", cfg));
        let stage2 = (m.video && (m.text || m.audio)).then(|| CrossPair::new(init, "stage2", cfg));
        let enabled = [m.text, m.audio, m.video, m.video, m.social, m.social];
        let mut placeholders = [None; 6];
        for (slot, on) in enabled.iter().enumerate() {
            if !on {
                placeholders[slot] = Some(init.normal(&format!("placeholder.{}", SLOT_NAMES[slot]), &[cfg.d_model], 0.02));
            }
        }
        let social_block = TransformerBlock::new(init, "social_attn", cfg.d_model, cfg.n_heads, cfg.ffn_dim);
        let head = ClassifierHead::new(init, cfg);
        Self {
            text,
            audio,
            frames,
            clips,
            social,
            stage1,
            stage2,
            placeholders,
            social_block,
            head,
        }
    }

    fn forward(
        &self,
        s: &mut Session,
        cfg: &ModelConfig,
        mel: &MelFrontend,
        counters: &EncoderCounters,
        sample: &MultimodalSample,
    ) -> Result<ForwardTrace> {
        let m = cfg.modalities;
        let missing = |name: &str| Error::Input(format!("sample {} is missing enabled modality {name}", sample.id));
        let mut attention = Vec::new();

        let f_t = match &self.text {
            Some(enc) => {
                if sample.text_tokens.is_empty() {
                    return Err(missing("text"));
                }
                EncoderCounters::bump(&counters.text);
                Some(enc.encode(s, &sample.text_tokens)?)
            }
            None => None,
        };
        let f_a = match &self.audio {
            Some(enc) => {
                if sample.waveform.is_empty() {
                    return Err(missing("audio"));
                }
                EncoderCounters::bump(&counters.audio);
                Some(match enc {
                    AudioEncoder::Vgg(v) => {
                        let frames = mel.compute(&sample.waveform)?;
                        v.encode(s, &frames)?
                    }
                    AudioEncoder::W2v(w) => w.encode(s, &sample.waveform)?,
                })
            }
            None => None,
        };
        let (f_f, x_clip) = match (&self.frames, &self.clips) {
            (Some(fe), Some(ce)) => {
                let frames = sample.frames.as_ref().ok_or_else(|| missing("video"))?;
                EncoderCounters::bump(&counters.frames);
                let f = fe.encode(s, frames)?;
                EncoderCounters::bump(&counters.clips);
                let c = ce.encode(s, frames)?;
                (Some(f), Some(pool_mean(s, &c)?))
            }
            _ => (None, None),
        };
        let social = match &self.social {
            Some(enc) => {
                if sample.user_tokens.is_empty() {
                    return Err(missing("social"));
                }
                EncoderCounters::bump(&counters.social);
                let (u, c) = enc.encode(s, &sample.user_tokens, &sample.comment_tokens)?;
                Some((pool_mean(s, &u)?, pool_mean(s, &c)?))
            }
            None => None,
        };

        // Stage 1: text ↔ audio. Without audio, F_{t←a} := F_t.
        let (mut text_seq, mut audio_seq) = (f_t, f_a);
        if let (Some(pair), Some(t), Some(a)) = (&self.stage1, f_t, f_a) {
            let (ta, at) = fuse_stage1(s, pair, t, a, cfg.attention_reading)?;
            attention.extend(ta.weights.iter().map(|&w| ("stage1.text", w)));
            attention.extend(at.weights.iter().map(|&w| ("stage1.audio", w)));
            text_seq = Some(ta.seq);
            audio_seq = Some(at.seq);
        }

        // Stage 2: (audio-enhanced) text ↔ frames. The audio sequence carries
        // the stage when text is disabled. Without video the stage is skipped.
        let mut frame_seq = f_f;
        if let (Some(pair), Some(f)) = (&self.stage2, f_f) {
            let carrier_is_text = text_seq.is_some();
            let carrier = text_seq.or(audio_seq).expect("stage2 exists only with text or audio");
            let (cf, fc) = fuse_stage2(s, pair, carrier, f, cfg.attention_reading)?;
            attention.extend(cf.weights.iter().map(|&w| ("stage2.text", w)));
            attention.extend(fc.weights.iter().map(|&w| ("stage2.frame", w)));
            if carrier_is_text {
                text_seq = Some(cf.seq);
            } else {
                audio_seq = Some(cf.seq);
            }
            frame_seq = Some(fc.seq);
        }

        let slot = |s: &mut Session, idx: usize, v: Option<Var>| -> Result<Var> {
            match (v, self.placeholders[idx]) {
                (Some(v), _) => Ok(v),
                (None, Some(p)) => Ok(s.p(p)),
                (None, None) => Err(Error::Contract(format!("no feature for slot {}", SLOT_NAMES[idx]))),
            }
        };
        let x_t = text_seq.map(|q| pool_mean(s, &q)).transpose()?;
        let x_a = audio_seq.map(|q| pool_mean(s, &q)).transpose()?;
        let x_f = frame_seq.map(|q| pool_mean(s, &q)).transpose()?;
        let fused = FusedFeatures {
            x_t: slot(s, 0, x_t)?,
            x_a: slot(s, 1, x_a)?,
            x_f: slot(s, 2, x_f)?,
            x_c: slot(s, 3, x_clip)?,
            x_u: slot(s, 4, social.map(|p| p.0))?,
            x_m: slot(s, 5, social.map(|p| p.1))?,
        };
        let _ = m;

        let [t, a, f, c, u, mm] = fused.slots();
        let social = social_self_attention(s, &self.social_block, &[t, a, f, c], &[u, mm], cfg.social_positions)?;
        attention.extend(social.weights.iter().map(|&w| ("social", w)));
        let (logits, head) = self.head.classify_traced(s, social.seq)?;
        attention.extend(head.iter().map(|&w| ("head", w)));
        Ok(ForwardTrace {
            logits,
            fused,
            attention,
        })
    }
}
