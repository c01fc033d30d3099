//! Log-mel spectrogram: Hann-windowed magnitude STFT, HTK-scale triangular
//! filterbank, natural log with a floor.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MEL_FLOOR: f64 = 1e-10;

/// `ln(MEL_FLOOR)`, the value of every bin of a silent frame.
pub fn log_floor() -> f64 {
    MEL_FLOOR.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: f64,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000.0,
            window: 64,
            hop: 32,
            n_mels: 16,
        }
    }
}

impl MelConfig {
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.hop + 1)
    }

    pub fn n_bins(&self) -> usize {
        self.window / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `n_mels + 2` filter edge frequencies in Hz, equally spaced in mel
/// between 0 and Nyquist. Band `j` rises from edge `j`, peaks at edge `j+1`
/// and falls to edge `j+2`.
pub fn mel_edges_hz(cfg: &MelConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate / 2.0);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

pub fn band_center_hz(cfg: &MelConfig, band: usize) -> f64 {
    mel_edges_hz(cfg)[band + 1]
}

/// Triangular filter weights `[n_mels][n_bins]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges_hz(cfg);
    let bin_hz = cfg.sample_rate / cfg.window as f64;
    (0..cfg.n_mels)
        .map(|j| {
            let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
            (0..cfg.n_bins())
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `[T×n_mels]` log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFrames {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl MelFrames {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Precomputed window, filterbank and FFT plan for one [`MelConfig`].
pub struct MelFrontend {
    cfg: MelConfig,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("cfg", &self.cfg).finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.window == 0 || cfg.hop == 0 || cfg.n_mels == 0 || !(cfg.sample_rate > 0.0) {
            return Err(Error::Input(format!("invalid mel configuration {cfg:?}")));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.window);
        Ok(Self {
            window: hann(cfg.window),
            bank: mel_filterbank(&cfg),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn compute(&self, waveform: &[f64]) -> Result<MelFrames> {
        let cfg = &self.cfg;
        let n_frames = cfg.n_frames(waveform.len()).ok_or_else(|| {
            Error::Input(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                waveform.len(),
                cfg.window
            ))
        })?;
        let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
        let mut mag = vec![0.0; cfg.n_bins()];
        for t in 0..n_frames {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(waveform[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for filt in &self.bank {
                let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out.push(e.max(MEL_FLOOR).ln());
            }
        }
        Ok(MelFrames {
            frames: Tensor::new(vec![n_frames, cfg.n_mels], out)?,
            frame_rate: cfg.sample_rate / cfg.hop as f64,
        })
    }
}

pub fn mel_spectrogram(waveform: &[f64], cfg: &MelConfig) -> Result<MelFrames> {
    MelFrontend::new(cfg.clone())?.compute(waveform)
}
