//! Experiment plans: which corpus, which model variants, which seeds.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use mmfd_core::datagen::{generate_corpus, load_corpus, Corpus, CorpusSpec};
use mmfd_core::fusion::{AudioEncoderKind, ModalitySet, ModelConfig};
use mmfd_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// A plan is malformed or asks for something impossible. Maps to exit code 2.
#[derive(Debug)]
pub struct PlanError(pub String);

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "plan error: {}", self.0)
    }
}

impl std::error::Error for PlanError {}

/// One model variant: an explicit modality mask and audio encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// `text+audio`, `audio,video`, `all`, ...
    pub modalities: String,
    pub audio_encoder: AudioEncoderKind,
}

impl Variant {
    /// Parses `MASK[:ENCODER]`. Without an encoder, masks containing audio
    /// default to w2v.
    pub fn parse(spec: &str) -> Result<Self, PlanError> {
        let (mask, enc) = match spec.split_once(':') {
            Some((m, e)) => (m, Some(e)),
            None => (spec, None),
        };
        let set: ModalitySet = mask.parse().map_err(|e| PlanError(format!("{e}")))?;
        let audio_encoder = match enc {
            Some(e) => e.parse().map_err(|e| PlanError(format!("{e}")))?,
            None if set.audio => AudioEncoderKind::W2v,
            None => AudioEncoderKind::None,
        };
        let name = if set.audio {
            format!("{}/{}", set.label(), audio_encoder)
        } else {
            set.label()
        };
        Ok(Self {
            name,
            modalities: set.label(),
            audio_encoder,
        })
    }

    pub fn mask(&self) -> Result<ModalitySet, PlanError> {
        self.modalities
            .parse()
            .map_err(|e| PlanError(format!("variant {}: {e}", self.name)))
    }

    pub fn validate(&self) -> Result<ModalitySet, PlanError> {
        let mask = self.mask()?;
        if mask.audio && self.audio_encoder == AudioEncoderKind::None {
            return Err(PlanError(format!(
                "variant {} requests audio without an audio encoder",
                self.name
            )));
        }
        if !mask.audio && self.audio_encoder != AudioEncoderKind::None {
            return Err(PlanError(format!(
                "variant {} names audio encoder {} but audio is disabled",
                self.name, self.audio_encoder
            )));
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Existing corpus file. Exactly one of `corpus` and `generate` is set.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<CorpusSpec>,
    /// Base model configuration; variants override modalities, encoder and seed.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub shifts: Vec<i64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), PlanError> {
        match (&self.corpus, &self.generate) {
            (Some(_), Some(_)) => return Err(PlanError("give either a corpus path or a generation spec, not both".into())),
            (None, None) => return Err(PlanError("no corpus: give a corpus path or a generation spec".into())),
            _ => {}
        }
        if self.variants.is_empty() {
            return Err(PlanError("plan has no variants".into()));
        }
        if self.seeds.is_empty() {
            return Err(PlanError("plan needs at least one seed".into()));
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(PlanError(format!("seed {s} listed twice")));
        }
        let mut names = HashSet::new();
        for v in &self.variants {
            v.validate()?;
            if !names.insert(v.name.as_str()) {
                return Err(PlanError(format!("variant name {} used twice", v.name)));
            }
        }
        if self.train.batch_size == 0 {
            return Err(PlanError("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> anyhow::Result<Corpus> {
        match (&self.corpus, &self.generate) {
            (Some(p), None) => Ok(load_corpus(p)?),
            (None, Some(spec)) => Ok(generate_corpus(spec)?),
            _ => Err(PlanError("exactly one corpus source is required".into()).into()),
        }
    }

    /// The base config with a variant's mask, encoder and the run seed.
    pub fn variant_config(&self, v: &Variant, seed: u64) -> Result<ModelConfig, PlanError> {
        let mask = v.validate()?;
        let cfg = ModelConfig {
            seed,
            ..self.model.clone()
        }
        .with_modalities(mask, v.audio_encoder);
        cfg.validate()
            .map_err(|e| PlanError(format!("variant {}: {e}", v.name)))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        let v = Variant::parse("text+audio").unwrap();
        assert_eq!(v.audio_encoder, AudioEncoderKind::W2v);
        assert_eq!(v.name, "audio+text/w2v");
        assert_eq!(Variant::parse("text").unwrap().name, "text");
        assert!(Variant::parse("text+audio:none").unwrap().validate().is_err());
        assert!(Variant::parse("text:vgg").unwrap().validate().is_err());
        assert!(Variant::parse("smell").is_err());
    }

    #[test]
    fn plan_validation() {
        let mut p = ExperimentPlan {
            corpus: None,
            generate: Some(CorpusSpec::default()),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variants: vec![Variant::parse("text").unwrap()],
            seeds: vec![0],
            shifts: vec![],
            out: None,
        };
        assert!(p.validate().is_ok());
        p.seeds = vec![1, 1];
        assert!(p.validate().is_err());
        p.seeds = vec![];
        assert!(p.validate().is_err());
    }
}
