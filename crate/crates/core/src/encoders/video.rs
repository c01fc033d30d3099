//! Video encoders: a per-frame conv stack with shared weights, and a
//! clip-level motion encoder that convolves over sliding windows of
//! consecutive frames and averages the windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModelConfig;
use crate::graph::PoolKind;
use crate::nn::{Init, Linear, Session};
use crate::tensor::Tensor;

use super::audio::Conv;
use super::{FeatureSequence, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameGeometry {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

fn check_frames(frames: &Tensor, geo: &FrameGeometry) -> Result<usize> {
    match frames.shape()[..] {
        [f, h, w, c] if h == geo.height && w == geo.width && c == geo.channels => Ok(f),
        _ => Err(Error::dim(
            "video",
            format!(
                "expected [F×{}×{}×{}] frames, got {:?}",
                geo.height,
                geo.width,
                geo.channels,
                frames.shape()
            ),
        )),
    }
}

/// conv3×3 → relu → conv3×3 → relu → maxpool 2×2 → linear, applied to each
/// frame independently.
#[derive(Clone, Debug)]
pub struct FrameEncoder {
    a: Conv,
    b: Conv,
    proj: Linear,
    geometry: FrameGeometry,
}

impl FrameEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let geo = cfg.frame;
        let c = cfg.frame_channels;
        let a = Conv::before_relu(init, "frame.conv_a", &[c, geo.channels, 3, 3]);
        let b = Conv::before_relu(init, "frame.conv_b", &[c, c, 3, 3]);
        let flat = (geo.height.saturating_sub(4) / 2).max(1) * (geo.width.saturating_sub(4) / 2).max(1) * c;
        let proj = Linear::new(init, "frame.proj", flat, cfg.d_model, true);
        Self {
            a,
            b,
            proj,
            geometry: geo,
        }
    }

    pub fn encode(&self, s: &mut Session, frames: &Tensor) -> Result<FeatureSequence> {
        let n = check_frames(frames, &self.geometry)?;
        let geo = self.geometry;
        if geo.height < 6 || geo.width < 6 {
            return Err(Error::dim("frame encoder", "frames must be at least 6×6"));
        }
        let per = geo.pixels();
        let mut rows = Vec::with_capacity(n);
        for f in 0..n {
            let img = Tensor::new(
                vec![geo.height, geo.width, geo.channels],
                frames.data()[f * per..(f + 1) * per].to_vec(),
            )?;
            let x = s.graph.constant(img);
            let x = self.a.conv2d(s, x)?;
            let x = s.graph.relu(x);
            let x = self.b.conv2d(s, x)?;
            let x = s.graph.relu(x);
            let x = s.graph.pool2d(x, PoolKind::Max, (2, 2), (2, 2))?;
            let numel = s.graph.value(x).numel();
            rows.push(s.graph.reshape(x, &[1, numel])?);
        }
        let stacked = s.graph.concat_rows(&rows)?;
        let features = self.proj.forward(s, stacked)?;
        Ok(FeatureSequence {
            modality: Modality::Frame,
            features,
            length: n,
        })
    }
}

/// Temporal convolution whose kernel spans `clip_len` whole frames (a 3-D
/// convolution with full spatial extent), GELU, projection, then the mean
/// over all windows as a single aggregated motion feature.
#[derive(Clone, Debug)]
pub struct ClipEncoder {
    temporal: Conv,
    proj: Linear,
    clip_len: usize,
    geometry: FrameGeometry,
}

impl ClipEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let geo = cfg.frame;
        let temporal = Conv::new(init, "clip.temporal", &[cfg.clip_channels, geo.pixels(), cfg.clip_len]);
        let proj = Linear::new(init, "clip.proj", cfg.clip_channels, cfg.d_model, true);
        Self {
            temporal,
            proj,
            clip_len: cfg.clip_len,
            geometry: geo,
        }
    }

    pub fn clip_len(&self) -> usize {
        self.clip_len
    }

    /// Per-window features `[n_windows×d_model]` before averaging.
    pub fn window_features(&self, s: &mut Session, frames: &Tensor) -> Result<crate::graph::Var> {
        let n = check_frames(frames, &self.geometry)?;
        if n < self.clip_len {
            return Err(Error::Input(format!(
                "{n} frames is fewer than the clip length {}",
                self.clip_len
            )));
        }
        let x = s.graph.constant(frames.reshaped(&[n, self.geometry.pixels()])?);
        let x = self.temporal.conv1d(s, x, 1)?;
        let x = s.graph.gelu(x);
        self.proj.forward(s, x)
    }

    pub fn encode(&self, s: &mut Session, frames: &Tensor) -> Result<FeatureSequence> {
        let w = self.window_features(s, frames)?;
        let mean = s.graph.mean_rows(w)?;
        let d = s.graph.shape(mean)[0];
        let features = s.graph.reshape(mean, &[1, d])?;
        Ok(FeatureSequence {
            modality: Modality::Clip,
            features,
            length: 1,
        })
    }
}
