//! Synthetic cross-modal-consistency corpus.
//!
//! Every sample draws a text topic `z`. Real samples carry `z` in text, audio
//! and video; fake samples move the audio topic to a different code and the
//! video topic with probability ½. No single modality carries label
//! information: each per-modality topic is uniform and independent of the
//! label, so text-only decoding of the label is at chance for every noise
//! level. Audio and video embed their topic only inside a signal window
//! (hops / frames `[window_start, window_start + window_len)`), so shifting
//! the audio in time breaks its correspondence with the other modalities.
//!
//! Generation is counter-based: sample `i` draws from a ChaCha8 stream keyed
//! by `(seed, i)`, so samples can be generated in any order.
//!
//! # Container format
//!
//! ```text
//! b"MMFDCORP" | u32 version | u64 header_len | header JSON
//! then per record: u64 record_len | record body
//! ```
//!
//! The header is `{"spec": CorpusSpec, "n_records": n}`. A record body is,
//! all integers and floats little-endian:
//!
//! ```text
//! u32 id_len | id utf-8 | i64 timestamp | u8 label
//! u32 topic_text | u32 topic_audio | u32 topic_video
//! u32 n | n × u32 text_tokens
//! u32 n | n × f64 waveform
//! u8 has_frames | [u32 rank | rank × u32 extent | Π extent × f64 values]
//! u32 n | n × u32 user_tokens
//! u32 n | n × u32 comment_tokens
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::mel::{band_center_hz, mel_edges_hz, MelConfig, MelFrontend};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FILLER_TOKENS: std::ops::RangeInclusive<u32> = 1..=15;
pub const TOPIC_TOKEN_BASE: u32 = 16;
pub const TOPIC_TOKENS_PER_CODE: u32 = 16;
pub const SOCIAL_TOKENS: std::ops::RangeInclusive<u32> = 208..=253;
pub const REAL_MARKER: u32 = 254;
pub const FAKE_MARKER: u32 = 255;
const TIMESTAMP_BASE: i64 = 1_600_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: String,
    pub timestamp: i64,
    pub text_tokens: Vec<u32>,
    pub waveform: Vec<f64>,
    /// `[F×H×W×C]` frames.
    pub frames: Option<Tensor>,
    pub user_tokens: Vec<u32>,
    pub comment_tokens: Vec<u32>,
    /// 0 real, 1 fake.
    pub label: u8,
    pub topic_text: u32,
    pub topic_audio: u32,
    pub topic_video: u32,
}

impl MultimodalSample {
    pub fn is_consistent(&self) -> bool {
        (self.label == 0) == (self.topic_text == self.topic_audio && self.topic_audio == self.topic_video)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub n_topics: u32,
    /// Standard deviation of additive white noise on audio and frames.
    pub noise_level: f64,
    pub fake_fraction: f64,
    pub seed: u64,
    /// First hop / frame of the signal window.
    pub window_start: usize,
    /// Window length in hops (audio) and frames (video).
    pub window_len: usize,
    pub mel: MelConfig,
    /// Waveform length in hops.
    pub n_hops: usize,
    pub n_frames: usize,
    pub frame_size: usize,
    /// Adds an equal-amplitude tone of a different topic to the audio outside
    /// the signal window, so only the window position identifies the topic.
    pub decoy: bool,
    /// Probability that a comment stream carries a label marker token.
    pub social_signal: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_topics: 4,
            noise_level: 0.0,
            fake_fraction: 0.5,
            seed: 0,
            window_start: 0,
            window_len: 4,
            mel: MelConfig::default(),
            n_hops: 8,
            n_frames: 8,
            frame_size: 8,
            decoy: false,
            social_signal: 0.0,
        }
    }
}

impl CorpusSpec {
    pub fn waveform_len(&self) -> usize {
        self.n_hops * self.mel.hop
    }

    pub fn n_fake(&self) -> usize {
        (self.n_samples as f64 * self.fake_fraction).round() as usize
    }

    /// Mel frames lying entirely inside the signal window.
    pub fn window_mel_frames(&self) -> std::ops::Range<usize> {
        let span = self.mel.window.div_ceil(self.mel.hop);
        let end = (self.window_start + self.window_len + 1).saturating_sub(span);
        self.window_start..end.max(self.window_start)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.n_topics < 2 {
            return fail(format!("n_topics must be at least 2, got {}", self.n_topics));
        }
        if !(self.fake_fraction > 0.0 && self.fake_fraction < 1.0) {
            return fail(format!("fake_fraction {} outside (0, 1)", self.fake_fraction));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return fail(format!("noise_level {} must be finite and non-negative", self.noise_level));
        }
        if !(0.0..=1.0).contains(&self.social_signal) {
            return fail(format!("social_signal {} outside [0, 1]", self.social_signal));
        }
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        if self.window_len == 0
            || self.window_start + self.window_len > self.n_hops
            || self.window_start + self.window_len > self.n_frames
        {
            return fail("signal window must be non-empty and fit both the waveform and the video".into());
        }
        if self.window_mel_frames().is_empty() {
            return fail("signal window is shorter than one mel frame".into());
        }
        let after = self.window_start + 2 * self.window_len <= self.n_hops;
        if self.decoy && !after && self.window_start < self.window_len {
            return fail("decoy needs a window-sized gap before or after the signal window".into());
        }
        if self.frame_size < 2 || self.frame_size % 2 != 0 {
            return fail(format!("frame_size {} must be even and at least 2", self.frame_size));
        }
        let cells = (self.frame_size / 2).pow(2);
        if self.n_topics as usize > cells {
            return fail(format!("{} topics exceed the {cells} video pattern cells", self.n_topics));
        }
        let max_topics = (SOCIAL_TOKENS.start() - TOPIC_TOKEN_BASE) / TOPIC_TOKENS_PER_CODE;
        if self.n_topics > max_topics {
            return fail(format!("{} topics exceed the {max_topics} text token blocks", self.n_topics));
        }
        topic_bands(self).map(|_| ())
    }
}

/// Mel bands that resolve a pure tone: the filter extends at least one FFT
/// bin to each side of its center, and a tone at the center lands in it.
pub fn representable_bands(mel: &MelConfig) -> Result<Vec<usize>> {
    let front = MelFrontend::new(mel.clone())?;
    let edges = mel_edges_hz(mel);
    let bin_hz = mel.sample_rate / mel.window as f64;
    let mut out = Vec::new();
    for band in 0..mel.n_mels {
        let f = band_center_hz(mel, band);
        if (f - edges[band]).min(edges[band + 2] - f) < bin_hz {
            continue;
        }
        let tone: Vec<f64> = (0..mel.window)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / mel.sample_rate).sin())
            .collect();
        let frames = front.compute(&tone)?;
        if argmax(frames.frames.row(0)) == band {
            out.push(band);
        }
    }
    Ok(out)
}

/// The mel band carrying each topic code, spread evenly over the
/// representable bands and anchored at the highest one.
pub fn topic_bands(spec: &CorpusSpec) -> Result<Vec<usize>> {
    let reps = representable_bands(&spec.mel)?;
    let n = spec.n_topics as usize;
    if n > reps.len() {
        return Err(Error::Spec(format!(
            "{n} topics exceed the {} representable mel bands",
            reps.len()
        )));
    }
    let spacing = (reps.len() - 1) / (n - 1);
    let top = reps.len() - 1;
    Ok((0..n).map(|z| reps[top - spacing * (n - 1 - z)]).collect())
}

/// Top-left corner of the bright 2×2 cell encoding topic `z`.
pub fn topic_cell(spec: &CorpusSpec, z: u32) -> (usize, usize) {
    let per_row = spec.frame_size / 2;
    let cells = per_row * per_row;
    let cell = z as usize * cells / spec.n_topics as usize;
    (2 * (cell / per_row), 2 * (cell % per_row))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn other_topic(rng: &mut ChaCha8Rng, n: u32, not: u32) -> u32 {
    let r = rng.gen_range(0..n - 1);
    if r >= not {
        r + 1
    } else {
        r
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A generated corpus together with the `CorpusSpec` that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<MultimodalSample>,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let bands = topic_bands(spec)?;
    let centers: Vec<f64> = bands.iter().map(|&b| band_center_hz(&spec.mel, b)).collect();

    // Which indices are fake: a seeded permutation on its own stream.
    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    order.shuffle(&mut sample_rng(spec.seed, u64::MAX));
    let mut fake = vec![false; spec.n_samples];
    for &i in &order[..spec.n_fake()] {
        fake[i] = true;
    }

    let samples = (0..spec.n_samples)
        .map(|i| generate_sample(spec, &centers, i, fake[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        samples,
    })
}

fn generate_sample(spec: &CorpusSpec, centers: &[f64], index: usize, fake: bool) -> Result<MultimodalSample> {
    let mut rng = sample_rng(spec.seed, index as u64);
    let n = spec.n_topics;
    let topic_text = rng.gen_range(0..n);
    let (topic_audio, topic_video) = if fake {
        let a = other_topic(&mut rng, n, topic_text);
        let v = if rng.gen_bool(0.5) {
            other_topic(&mut rng, n, topic_text)
        } else {
            topic_text
        };
        (a, v)
    } else {
        (topic_text, topic_text)
    };
    let noise = (spec.noise_level > 0.0)
        .then(|| Normal::new(0.0, spec.noise_level).expect("validated noise level"));

    // Text: half topic tokens at shuffled positions, half filler.
    let len = rng.gen_range(8..=16usize);
    let mut text_tokens: Vec<u32> = (0..len)
        .map(|j| {
            if j < len / 2 {
                TOPIC_TOKEN_BASE + TOPIC_TOKENS_PER_CODE * topic_text + rng.gen_range(0..TOPIC_TOKENS_PER_CODE)
            } else {
                rng.gen_range(FILLER_TOKENS)
            }
        })
        .collect();
    text_tokens.shuffle(&mut rng);

    // Audio: tone inside the window, optional decoy tone outside it.
    let hop = spec.mel.hop;
    let sr = spec.mel.sample_rate;
    let mut waveform = vec![0.0; spec.waveform_len()];
    let mut tone = |rng: &mut ChaCha8Rng, freq: f64, from: usize, to: usize| {
        let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        for (t, w) in waveform[from..to].iter_mut().enumerate() {
            *w += (2.0 * std::f64::consts::PI * freq * (from + t) as f64 / sr + phase).sin();
        }
    };
    let win = spec.window_start * hop..(spec.window_start + spec.window_len) * hop;
    tone(&mut rng, centers[topic_audio as usize], win.start, win.end);
    if spec.decoy {
        let decoy = other_topic(&mut rng, n, topic_audio);
        let start = (spec.window_start + spec.window_len) * hop;
        let start = if start + spec.window_len * hop <= spec.waveform_len() {
            start
        } else {
            (spec.window_start - spec.window_len) * hop
        };
        tone(&mut rng, centers[decoy as usize], start, start + spec.window_len * hop);
    }
    if let Some(d) = &noise {
        for w in waveform.iter_mut() {
            *w += d.sample(&mut rng);
        }
    }

    // Video: a bright 2×2 cell in each window frame.
    let s = spec.frame_size;
    let mut pixels = vec![0.0; spec.n_frames * s * s];
    let (r0, c0) = topic_cell(spec, topic_video);
    for f in spec.window_start..spec.window_start + spec.window_len {
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            pixels[f * s * s + (r0 + dr) * s + c0 + dc] = 1.0;
        }
    }
    if let Some(d) = &noise {
        for p in pixels.iter_mut() {
            *p += d.sample(&mut rng);
        }
    }
    let frames = Tensor::new(vec![spec.n_frames, s, s, 1], pixels)?;

    // Social: label-free filler, optionally a weak marker.
    let user_tokens = (0..rng.gen_range(4..=8)).map(|_| rng.gen_range(SOCIAL_TOKENS)).collect();
    let mut comment_tokens: Vec<u32> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(SOCIAL_TOKENS)).collect();
    if spec.social_signal > 0.0 && rng.gen_bool(spec.social_signal) {
        comment_tokens.push(if fake { FAKE_MARKER } else { REAL_MARKER });
    }

    let timestamp = TIMESTAMP_BASE + 100 * index as i64 + rng.gen_range(0..50);
    Ok(MultimodalSample {
        id: format!("s{:06}", index),
        timestamp,
        text_tokens,
        waveform,
        frames: Some(frames),
        user_tokens,
        comment_tokens,
        label: fake as u8,
        topic_text,
        topic_audio,
        topic_video,
    })
}

/// Circularly shifts the waveform right by `shift · hop` samples.
pub fn inject_misalignment(sample: &MultimodalSample, shift: i64, hop: usize) -> Result<MultimodalSample> {
    let len = sample.waveform.len();
    if hop == 0 || len == 0 {
        return Err(Error::Input("misalignment needs a positive hop and a non-empty waveform".into()));
    }
    let frames = (len / hop) as i64;
    if shift.unsigned_abs() > frames as u64 {
        return Err(Error::Input(format!(
            "shift {shift} exceeds the {frames} audio frames"
        )));
    }
    let by = (shift * hop as i64).rem_euclid(len as i64) as usize;
    let mut out = sample.clone();
    out.waveform.rotate_right(by);
    Ok(out)
}

/// Topic from the text token histogram.
pub fn decode_text_topic(spec: &CorpusSpec, tokens: &[u32]) -> u32 {
    let mut hist = vec![0.0; spec.n_topics as usize];
    for &t in tokens {
        if t >= TOPIC_TOKEN_BASE {
            let z = ((t - TOPIC_TOKEN_BASE) / TOPIC_TOKENS_PER_CODE) as usize;
            if z < hist.len() {
                hist[z] += 1.0;
            }
        }
    }
    argmax(&hist) as u32
}

/// Topic from the mel-band argmax averaged over the window frames.
pub fn decode_audio_topic(spec: &CorpusSpec, waveform: &[f64]) -> Result<u32> {
    let mel = MelFrontend::new(spec.mel.clone())?.compute(waveform)?;
    let bands = topic_bands(spec)?;
    let mut energy = vec![0.0; bands.len()];
    for t in spec.window_mel_frames() {
        let row = mel.frames.row(t);
        for (e, &b) in energy.iter_mut().zip(&bands) {
            *e += row[b];
        }
    }
    Ok(argmax(&energy) as u32)
}

/// Topic from the brightest pattern cell summed over the window frames.
pub fn decode_video_topic(spec: &CorpusSpec, frames: &Tensor) -> u32 {
    let s = spec.frame_size;
    let scores: Vec<f64> = (0..spec.n_topics)
        .map(|z| {
            let (r0, c0) = topic_cell(spec, z);
            (spec.window_start..spec.window_start + spec.window_len)
                .flat_map(|f| {
                    [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dr, dc)| frames.data()[f * s * s + (r0 + dr) * s + c0 + dc])
                })
                .sum()
        })
        .collect();
    argmax(&scores) as u32
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: CorpusSpec,
    n_records: usize,
}

const MAGIC: &[u8; 8] = b"MMFDCORP";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tokens(out: &mut Vec<u8>, t: &[u32]) {
    put_u32(out, t.len() as u32);
    for &v in t {
        put_u32(out, v);
    }
}

fn put_floats(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_record(s: &MultimodalSample) -> Vec<u8> {
    let mut b = Vec::new();
    put_u32(&mut b, s.id.len() as u32);
    b.extend_from_slice(s.id.as_bytes());
    b.extend_from_slice(&s.timestamp.to_le_bytes());
    b.push(s.label);
    put_u32(&mut b, s.topic_text);
    put_u32(&mut b, s.topic_audio);
    put_u32(&mut b, s.topic_video);
    put_tokens(&mut b, &s.text_tokens);
    put_u32(&mut b, s.waveform.len() as u32);
    put_floats(&mut b, &s.waveform);
    match &s.frames {
        Some(f) => {
            b.push(1);
            put_u32(&mut b, f.rank() as u32);
            for &e in f.shape() {
                put_u32(&mut b, e as u32);
            }
            put_floats(&mut b, f.data());
        }
        None => b.push(0),
    }
    put_tokens(&mut b, &s.user_tokens);
    put_tokens(&mut b, &s.comment_tokens);
    b
}

pub fn write_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        spec: corpus.spec.clone(),
        n_records: corpus.samples.len(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for s in &corpus.samples {
        let rec = encode_record(s);
        out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    Ok(out)
}

/// Bounds-checked little-endian reader over one record.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            record: self.record,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tokens(&mut self, what: &str) -> Result<Vec<u32>> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n.saturating_mul(4), what)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn decode_record(r: &mut Reader) -> Result<MultimodalSample> {
    let id_len = r.u32("id length")? as usize;
    let id = String::from_utf8(r.take(id_len, "id")?.to_vec()).map_err(|_| r.err("id is not utf-8"))?;
    let timestamp = r.u64("timestamp")? as i64;
    let label = r.u8("label")?;
    if label > 1 {
        return Err(r.err(format!("label {label} is not 0 or 1")));
    }
    let topic_text = r.u32("topic_text")?;
    let topic_audio = r.u32("topic_audio")?;
    let topic_video = r.u32("topic_video")?;
    let text_tokens = r.tokens("text tokens")?;
    let n = r.u32("waveform length")? as usize;
    let waveform = r.floats(n, "waveform")?;
    let frames = match r.u8("frame flag")? {
        0 => None,
        1 => {
            let rank = r.u32("frame rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("frame extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.floats(n, "frames")?;
            Some(Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?)
        }
        f => return Err(r.err(format!("bad frame flag {f}"))),
    };
    let user_tokens = r.tokens("user tokens")?;
    let comment_tokens = r.tokens("comment tokens")?;
    Ok(MultimodalSample {
        id,
        timestamp,
        text_tokens,
        waveform,
        frames,
        user_tokens,
        comment_tokens,
        label,
        topic_text,
        topic_audio,
        topic_video,
    })
}

/// Parses a corpus container. Errors carry the 1-based record index, or 0
/// for the file header.
pub fn read_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut top = Reader {
        buf: bytes,
        pos: 0,
        record: 0,
    };
    if top.take(8, "magic")? != MAGIC {
        return Err(top.err("not a corpus file"));
    }
    let version = top.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(top.err(format!("unsupported format version {version}")));
    }
    let hlen = top.u64("header length")? as usize;
    let header: Header = serde_json::from_slice(top.take(hlen, "header")?).map_err(|e| top.err(e.to_string()))?;
    let mut samples = Vec::with_capacity(header.n_records);
    for i in 1..=header.n_records {
        top.record = i;
        let len = top.u64("record length")? as usize;
        let mut r = Reader {
            buf: top.take(len, "record body")?,
            pos: 0,
            record: i,
        };
        let s = decode_record(&mut r)?;
        if r.pos != r.buf.len() {
            return Err(r.err("record has trailing bytes"));
        }
        samples.push(s);
    }
    if top.pos != bytes.len() {
        top.record = 0;
        return Err(top.err("trailing bytes after the last record"));
    }
    Ok(Corpus {
        spec: header.spec,
        samples,
    })
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_corpus(corpus)?)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CorpusSpec {
        CorpusSpec {
            n_samples: n,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn default_topic_bands() {
        assert_eq!(topic_bands(&CorpusSpec::default()).unwrap(), vec![6, 9, 12, 15]);
    }

    #[test]
    fn too_many_topics_is_a_spec_error() {
        let spec = CorpusSpec {
            n_topics: 15,
            ..small(4)
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn fake_count_and_consistency() {
        let c = generate_corpus(&small(101)).unwrap();
        assert_eq!(c.samples.iter().filter(|s| s.label == 1).count(), 51);
        assert!(c.samples.iter().all(MultimodalSample::is_consistent));
        assert!(c.samples.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn noiseless_decoders_recover_everything() {
        for decoy in [false, true] {
            let spec = CorpusSpec { decoy, ..small(60) };
            for s in generate_corpus(&spec).unwrap().samples {
                assert_eq!(decode_text_topic(&spec, &s.text_tokens), s.topic_text);
                assert_eq!(decode_audio_topic(&spec, &s.waveform).unwrap(), s.topic_audio);
                assert_eq!(decode_video_topic(&spec, s.frames.as_ref().unwrap()), s.topic_video);
            }
        }
    }

    #[test]
    fn misalignment_identities() {
        let c = generate_corpus(&small(2)).unwrap();
        let s = &c.samples[0];
        let hop = c.spec.mel.hop;
        assert_eq!(&inject_misalignment(s, 0, hop).unwrap(), s);
        let there = inject_misalignment(s, 3, hop).unwrap();
        assert_eq!(&inject_misalignment(&there, -3, hop).unwrap(), s);
        assert_eq!(&inject_misalignment(s, 8, hop).unwrap(), s);
        assert!(inject_misalignment(s, 9, hop).is_err());
        assert_eq!(there.frames, s.frames);
        assert_eq!(there.label, s.label);
    }

    #[test]
    fn truncated_file_names_record() {
        let c = generate_corpus(&small(3)).unwrap();
        let bytes = write_corpus(&c).unwrap();
        assert_eq!(read_corpus(&bytes).unwrap(), c);
        match read_corpus(&bytes[..bytes.len() - 10]) {
            Err(Error::Format { record, .. }) => assert_eq!(record, 3),
            other => panic!("{other:?}"),
        }
    }
}
