use crate::error::{Error, Result};
use crate::fusion::ModelConfig;
use crate::nn::{add_positions, run_stack, Init, ParamId, Session, TransformerBlock};

use super::{FeatureSequence, Modality};

/// Token id reserved for padding; an empty comment stream becomes `[PAD]`.
pub const PAD_TOKEN: u32 = 0;

/// Token embedding, sinusoidal positions, then `layers` self-attention
/// blocks. Used for titles/transcripts and, with separate weights, for the
/// social streams.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub modality: Modality,
    pub vocab_size: usize,
    pub max_len: usize,
    pub embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl TextEncoder {
    pub fn new(init: &mut Init, name: &str, modality: Modality, cfg: &ModelConfig, layers: usize) -> Self {
        let embedding = init.normal(&format!("{name}.embedding"), &[cfg.vocab_size, cfg.d_model], 1.0);
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(init, &format!("{name}.block{i}"), cfg.d_model, cfg.n_heads, cfg.ffn_dim))
            .collect();
        Self {
            modality,
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_text_len,
            embedding,
            blocks,
        }
    }

    pub fn encode(&self, s: &mut Session, tokens: &[u32]) -> Result<FeatureSequence> {
        let name = self.modality.name();
        if tokens.is_empty() {
            return Err(Error::Input(format!("{name} token sequence is empty")));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Input(format!(
                "{name} sequence of {} tokens exceeds max length {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Input(format!(
                "{name} token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = s.p(self.embedding);
        let x = s.graph.gather_rows(table, &idx)?;
        let x = add_positions(s, x)?;
        let (features, _) = run_stack(&self.blocks, s, x, None)?;
        Ok(FeatureSequence {
            modality: self.modality,
            features,
            length: tokens.len(),
        })
    }
}

/// User-profile and comment encoders with independent weights.
#[derive(Clone, Debug)]
pub struct SocialEncoder {
    pub user: TextEncoder,
    pub comment: TextEncoder,
}

impl SocialEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        Self {
            user: TextEncoder::new(init, "user", Modality::User, cfg, cfg.social_layers),
            comment: TextEncoder::new(init, "comment", Modality::Comment, cfg, cfg.social_layers),
        }
    }

    pub fn encode(
        &self,
        s: &mut Session,
        user_tokens: &[u32],
        comment_tokens: &[u32],
    ) -> Result<(FeatureSequence, FeatureSequence)> {
        let user = self.user.encode(s, user_tokens)?;
        let comment = if comment_tokens.is_empty() {
            self.comment.encode(s, &[PAD_TOKEN])?
        } else {
            self.comment.encode(s, comment_tokens)?
        };
        Ok((user, comment))
    }
}
