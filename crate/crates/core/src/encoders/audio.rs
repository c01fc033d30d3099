//! Audio encoders: a VGG-style conv stack over log-mel frames and a
//! wav2vec-style strided conv extractor over the raw waveform followed by a
//! transformer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModelConfig;
use crate::graph::{PoolKind, Var};
use crate::nn::{add_positions, run_stack, Init, LayerNorm, Linear, ParamId, Session, TransformerBlock};
use crate::tensor::Tensor;

use super::mel::MelFrames;
use super::{FeatureSequence, Modality};

const VGG_KERNEL: usize = 3;

/// `ln(0.01)`: log-mel values below this are clipped before the conv stack.
pub const VGG_INPUT_FLOOR: f64 = -4.605_170_185_988_091;

/// Initial conv bias. Slightly positive so that all-zero input regions
/// (silence, black frame background) do not sit exactly on the relu kink.
pub const CONV_BIAS_INIT: f64 = 0.01;

/// Conv kernel plus per-channel bias.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub(crate) fn new(init: &mut Init, name: &str, shape: &[usize]) -> Self {
        Self::with_bias(init, name, shape, 0.0)
    }

    /// A conv feeding a relu.
    pub(crate) fn before_relu(init: &mut Init, name: &str, shape: &[usize]) -> Self {
        Self::with_bias(init, name, shape, CONV_BIAS_INIT)
    }

    fn with_bias(init: &mut Init, name: &str, shape: &[usize], bias: f64) -> Self {
        let c_out = shape[0];
        let fan_in: usize = shape[1..].iter().product();
        let kernel = init.glorot(&format!("{name}.kernel"), shape, fan_in, c_out);
        let bias = init.constant(&format!("{name}.bias"), &[c_out], bias);
        Self { kernel, bias }
    }

    /// Adds the bias along the trailing channel axis of any-rank `x`.
    fn add_bias(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let c = *shape.last().expect("rank");
        let rows = shape.iter().product::<usize>() / c;
        let flat = s.graph.reshape(x, &[rows, c])?;
        let b = s.p(self.bias);
        let y = s.graph.add_row(flat, b)?;
        s.graph.reshape(y, &shape)
    }

    pub(crate) fn conv1d(&self, s: &mut Session, x: Var, stride: usize) -> Result<Var> {
        let k = s.p(self.kernel);
        let y = s.graph.conv1d(x, k, stride)?;
        self.add_bias(s, y)
    }

    pub(crate) fn conv2d(&self, s: &mut Session, x: Var) -> Result<Var> {
        let k = s.p(self.kernel);
        let y = s.graph.conv2d(x, k, (1, 1))?;
        self.add_bias(s, y)
    }
}

#[derive(Clone, Debug)]
struct VggBlock {
    a: Conv,
    b: Conv,
}

/// `(conv3×3 → relu → conv3×3 → relu → maxpool)` blocks over the time × mel
/// plane. The time axis is edge-padded before every conv and never pooled, so
/// each input frame becomes one output row; the mel axis shrinks by the valid
/// convs and halves at each pool.
#[derive(Clone, Debug)]
pub struct VggEncoder {
    blocks: Vec<VggBlock>,
    proj: Linear,
    n_mels: usize,
}

impl VggEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.vgg_channels;
        let mut c_in = 1;
        let mut width = cfg.mel.n_mels;
        let mut blocks = Vec::with_capacity(cfg.vgg_blocks);
        for i in 0..cfg.vgg_blocks {
            blocks.push(VggBlock {
                a: Conv::before_relu(init, &format!("vgg.block{i}.conv_a"), &[c, c_in, VGG_KERNEL, VGG_KERNEL]),
                b: Conv::before_relu(init, &format!("vgg.block{i}.conv_b"), &[c, c, VGG_KERNEL, VGG_KERNEL]),
            });
            c_in = c;
            width = width.saturating_sub(2 * (VGG_KERNEL - 1)) / 2;
        }
        let proj = Linear::new(init, "vgg.proj", width.max(1) * c_in, cfg.d_model, true);
        Self {
            blocks,
            proj,
            n_mels: cfg.mel.n_mels,
        }
    }

    /// Repeats the first and last time rows `(VGG_KERNEL - 1) / 2` times so a
    /// valid conv keeps the time length. Constant input stays constant.
    fn pad_time(s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let (h, rest) = (shape[0], shape[1] * shape[2]);
        let flat = s.graph.reshape(x, &[h, rest])?;
        let first = s.graph.slice_rows(flat, 0, 1)?;
        let last = s.graph.slice_rows(flat, h - 1, h)?;
        let pad = (VGG_KERNEL - 1) / 2;
        let mut parts = vec![first; pad];
        parts.push(flat);
        parts.extend(std::iter::repeat(last).take(pad));
        let padded = s.graph.concat_rows(&parts)?;
        s.graph.reshape(padded, &[h + 2 * pad, shape[1], shape[2]])
    }

    pub fn encode(&self, s: &mut Session, mel: &MelFrames) -> Result<FeatureSequence> {
        let (t, m) = mel.frames.dims2("vgg")?;
        if m != self.n_mels {
            return Err(Error::dim("vgg", format!("expected {} mel bands, got {m}", self.n_mels)));
        }
        // Clip at VGG_INPUT_FLOOR and rescale so the clip level maps to 0.
        // The raw floor sits far below leakage, so an unclipped range would
        // bury band contrast under the silence/non-silence step.
        let floor = VGG_INPUT_FLOOR;
        let scaled = mel.frames.map(|v| (v.max(floor) - floor) / -floor);
        let mut x = s.graph.constant(scaled.reshaped(&[t, m, 1])?);
        for (i, blk) in self.blocks.iter().enumerate() {
            let w = s.graph.shape(x)[1];
            if t == 0 || w < 2 * (VGG_KERNEL - 1) + 2 {
                return Err(Error::dim(
                    "vgg",
                    format!("block {i}: input of {t} frames × {w} bands is too small for two {VGG_KERNEL}×{VGG_KERNEL} convs and a pool"),
                ));
            }
            x = Self::pad_time(s, x)?;
            x = blk.a.conv2d(s, x)?;
            x = s.graph.relu(x);
            x = Self::pad_time(s, x)?;
            x = blk.b.conv2d(s, x)?;
            x = s.graph.relu(x);
            x = s.graph.pool2d(x, PoolKind::Max, (1, 2), (1, 2))?;
        }
        let shape = s.graph.shape(x).to_vec();
        let (steps, width) = (shape[0], shape[1] * shape[2]);
        let flat = s.graph.reshape(x, &[steps, width])?;
        let features = self.proj.forward(s, flat)?;
        Ok(FeatureSequence {
            modality: Modality::Audio,
            features,
            length: steps,
        })
    }
}

/// One strided conv layer of the waveform feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub width: usize,
    pub stride: usize,
}

/// Strided conv1d extractor (each layer followed by GELU), layer norm, linear
/// projection to `d_model`, positions, then transformer blocks.
#[derive(Clone, Debug)]
pub struct W2vEncoder {
    convs: Vec<(Conv, usize)>,
    schedule: Vec<ConvLayer>,
    norm: LayerNorm,
    proj: Linear,
    blocks: Vec<TransformerBlock>,
}

impl W2vEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let ch = cfg.w2v_channels;
        let mut c_in = 1;
        let convs = cfg
            .w2v_conv
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let conv = Conv::new(init, &format!("w2v.conv{i}"), &[ch, c_in, l.width]);
                c_in = ch;
                (conv, l.stride)
            })
            .collect();
        let norm = LayerNorm::new(init, "w2v.norm", ch);
        let proj = Linear::new(init, "w2v.proj", ch, cfg.d_model, true);
        let blocks = (0..cfg.w2v_layers)
            .map(|i| TransformerBlock::new(init, &format!("w2v.block{i}"), cfg.d_model, cfg.n_heads, cfg.ffn_dim))
            .collect();
        Self {
            convs,
            schedule: cfg.w2v_conv.clone(),
            norm,
            proj,
            blocks,
        }
    }

    /// Output length of the conv stack for an input of `len` samples.
    pub fn feature_len(schedule: &[ConvLayer], len: usize) -> Option<usize> {
        schedule.iter().try_fold(len, |l, c| (l >= c.width).then(|| (l - c.width) / c.stride + 1))
    }

    pub fn min_waveform_len(schedule: &[ConvLayer]) -> usize {
        schedule.iter().rev().fold(1, |need, c| (need - 1) * c.stride + c.width)
    }

    /// Raw conv-extractor output `[L×channels]`, before normalisation.
    pub fn conv_features(&self, s: &mut Session, waveform: &[f64]) -> Result<Var> {
        if Self::feature_len(&self.schedule, waveform.len()).is_none() {
            return Err(Error::Input(format!(
                "waveform of {} samples is too short for the conv extractor (minimum {})",
                waveform.len(),
                Self::min_waveform_len(&self.schedule)
            )));
        }
        let mut x = s.graph.constant(Tensor::new(vec![waveform.len(), 1], waveform.to_vec())?);
        for (conv, stride) in &self.convs {
            x = conv.conv1d(s, x, *stride)?;
            x = s.graph.gelu(x);
        }
        Ok(x)
    }

    pub fn encode(&self, s: &mut Session, waveform: &[f64]) -> Result<FeatureSequence> {
        let x = self.conv_features(s, waveform)?;
        let length = s.graph.shape(x)[0];
        let x = self.norm.forward(s, x)?;
        let x = self.proj.forward(s, x)?;
        let x = add_positions(s, x)?;
        let (features, _) = run_stack(&self.blocks, s, x, None)?;
        Ok(FeatureSequence {
            modality: Modality::Audio,
            features,
            length,
        })
    }
}
