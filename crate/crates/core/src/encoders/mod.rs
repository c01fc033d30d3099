//! Per-modality feature extractors. Every encoder maps its raw input to a
//! [`FeatureSequence`] of `d_model`-wide rows on the session graph.

mod audio;
pub mod mel;
mod text;
mod video;

use serde::{Deserialize, Serialize};

use crate::graph::Var;

pub use audio::{ConvLayer, VggEncoder, W2vEncoder};
pub use mel::{log_floor, mel_spectrogram, MelConfig, MelFrames, MelFrontend};
pub use text::{SocialEncoder, TextEncoder, PAD_TOKEN};
pub use video::{ClipEncoder, FrameEncoder, FrameGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Frame,
    Clip,
    User,
    Comment,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Text,
        Modality::Audio,
        Modality::Frame,
        Modality::Clip,
        Modality::User,
        Modality::Comment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Frame => "frame",
            Modality::Clip => "clip",
            Modality::User => "user",
            Modality::Comment => "comment",
        }
    }
}

/// `[length×d_model]` features of one modality.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub features: Var,
    pub length: usize,
}
