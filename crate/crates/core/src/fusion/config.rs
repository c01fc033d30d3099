use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::mel::MelConfig;
use crate::encoders::{ConvLayer, FrameGeometry, W2vEncoder};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioEncoderKind {
    Vgg,
    W2v,
    None,
}

impl AudioEncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vgg => "vgg",
            Self::W2v => "w2v",
            Self::None => "none",
        }
    }
}

impl fmt::Display for AudioEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AudioEncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vgg" => Ok(Self::Vgg),
            "w2v" | "wav2vec" | "wav2vec2" => Ok(Self::W2v),
            "none" | "" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown audio encoder {other:?}"))),
        }
    }
}

/// Which of the four input groups a model consumes. `video` covers both
/// frame and clip features; `social` covers both user and comment streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySet {
    pub audio: bool,
    pub text: bool,
    pub video: bool,
    pub social: bool,
}

impl ModalitySet {
    pub const ALL: Self = Self {
        audio: true,
        text: true,
        video: true,
        social: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.audio || self.text || self.video || self.social)
    }

    /// Canonical `audio+text+video+social` ordering of the enabled groups.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.audio, "audio"),
            (self.text, "text"),
            (self.video, "video"),
            (self.social, "social"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    /// Parses `text+audio`, `audio,video` or `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = Self::default();
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "all" => set = Self::ALL,
                "audio" => set.audio = true,
                "text" => set.text = true,
                "video" => set.video = true,
                "social" => set.social = true,
                other => return Err(Error::Config(format!("unknown modality {other:?}"))),
            }
        }
        if set.is_empty() {
            return Err(Error::Config(format!("no modality in {s:?}")));
        }
        Ok(set)
    }
}

/// Which side of a cross-attention pair supplies the queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionReading {
    /// `F_{x←y}` takes queries from `x` and keys/values from `y`.
    #[default]
    TargetQueries,
    /// The swapped subscript reading: queries from `y`, keys/values from `x`.
    SourceQueries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub social_layers: usize,
    pub w2v_layers: usize,
    /// Stacked cross-attention blocks per direction in each fusion stage.
    pub fusion_layers: usize,
    pub audio_encoder: AudioEncoderKind,
    pub modalities: ModalitySet,
    /// Hidden width of the classifier MLP; 0 means a single affine layer.
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    pub attention_reading: AttentionReading,
    /// Add positions to the six-slot sequence before social self-attention.
    pub social_positions: bool,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub mel: MelConfig,
    pub vgg_channels: usize,
    pub vgg_blocks: usize,
    pub w2v_conv: Vec<ConvLayer>,
    pub w2v_channels: usize,
    pub frame: FrameGeometry,
    pub frame_channels: usize,
    pub clip_len: usize,
    pub clip_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            text_layers: 2,
            social_layers: 2,
            w2v_layers: 2,
            fusion_layers: 1,
            audio_encoder: AudioEncoderKind::W2v,
            modalities: ModalitySet::ALL,
            classifier_hidden: 32,
            dropout: 0.1,
            seed: 0,
            attention_reading: AttentionReading::TargetQueries,
            social_positions: false,
            vocab_size: 256,
            max_text_len: 32,
            mel: MelConfig::default(),
            vgg_channels: 8,
            vgg_blocks: 1,
            w2v_conv: vec![ConvLayer { width: 32, stride: 16 }, ConvLayer { width: 3, stride: 2 }],
            w2v_channels: 32,
            frame: FrameGeometry {
                height: 8,
                width: 8,
                channels: 1,
            },
            frame_channels: 8,
            clip_len: 4,
            clip_channels: 16,
        }
    }
}

impl ModelConfig {
    /// The smallest sensible configuration (d_model 8, one head, depth 1,
    /// every modality), used for end-to-end gradient checks.
    pub fn minimal() -> Self {
        Self {
            d_model: 8,
            n_heads: 1,
            ffn_dim: 8,
            text_layers: 1,
            social_layers: 1,
            w2v_layers: 1,
            fusion_layers: 1,
            classifier_hidden: 8,
            dropout: 0.0,
            vgg_channels: 2,
            w2v_channels: 4,
            frame_channels: 2,
            clip_channels: 4,
            ..Self::default()
        }
    }

    /// Sets the modality mask and keeps `audio_encoder` consistent with it.
    pub fn with_modalities(mut self, modalities: ModalitySet, audio: AudioEncoderKind) -> Self {
        self.modalities = modalities;
        self.audio_encoder = if modalities.audio { audio } else { AudioEncoderKind::None };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.modalities.is_empty() {
            return fail("at least one modality must be enabled".into());
        }
        if self.modalities.audio != (self.audio_encoder != AudioEncoderKind::None) {
            return fail(format!(
                "audio enabled = {} but audio_encoder = {}",
                self.modalities.audio, self.audio_encoder
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_text_len == 0 {
            return fail("ffn_dim, vocab_size and max_text_len must be positive".into());
        }
        if self.clip_len == 0 || self.fusion_layers == 0 {
            return fail("clip_len and fusion_layers must be positive".into());
        }
        if self.w2v_conv.is_empty() || self.w2v_conv.iter().any(|c| c.width == 0 || c.stride == 0) {
            return fail("w2v conv schedule needs at least one layer with positive width and stride".into());
        }
        Ok(())
    }

    /// Minimum waveform length the configured audio front end accepts.
    pub fn min_waveform_len(&self) -> usize {
        match self.audio_encoder {
            AudioEncoderKind::W2v => W2vEncoder::min_waveform_len(&self.w2v_conv),
            _ => self.mel.window,
        }
    }
}
