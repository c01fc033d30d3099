//! Result tables and their CSV / JSON renderings.
//!
//! Wall-clock time is kept on each row in memory and printed to stderr, but
//! never written to report files, so reports are byte-reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmfd_core::fusion::{AudioEncoderKind, ModalitySet};
use mmfd_core::train::MetricsReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CSV_HEADER: &str = "variant,audio_encoder,audio,text,video,social,seed,accuracy,f1,precision,recall";

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serialisable");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub corpus_spec_hash: String,
    pub seeds: Vec<u64>,
    /// How precision, recall and F1 are averaged over the two classes.
    pub averaging: String,
}

impl Provenance {
    pub fn new(command: &str, config_hash: String, corpus_spec_hash: String, seeds: Vec<u64>) -> Self {
        Self {
            tool: "mmfd".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            corpus_spec_hash,
            seeds,
            averaging: MetricsReport::AVERAGING.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub audio_encoder: AudioEncoderKind,
    pub modalities: ModalitySet,
    pub seed: u64,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricSummary {
    fn of(m: &MetricsReport) -> Self {
        Self {
            accuracy: m.accuracy,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
        }
    }

    fn fields(&self) -> [f64; 4] {
        [self.accuracy, self.f1, self.precision, self.recall]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self {
            accuracy: f[0],
            f1: f[1],
            precision: f[2],
            recall: f[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub audio_encoder: AudioEncoderKind,
    pub modalities: ModalitySet,
    pub n_seeds: usize,
    pub mean: MetricSummary,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub provenance: Provenance,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
}

impl ResultTable {
    /// Aggregates rows per variant, in first-appearance order.
    pub fn new(provenance: Provenance, rows: Vec<ResultRow>) -> Self {
        let mut order: Vec<&str> = Vec::new();
        for r in &rows {
            if !order.contains(&r.variant.as_str()) {
                order.push(&r.variant);
            }
        }
        let aggregates = order
            .iter()
            .map(|&name| {
                let group: Vec<&ResultRow> = rows.iter().filter(|r| r.variant == name).collect();
                let n = group.len() as f64;
                let mut mean = [0.0; 4];
                for r in &group {
                    for (m, v) in mean.iter_mut().zip(MetricSummary::of(&r.metrics).fields()) {
                        *m += v / n;
                    }
                }
                let mut var = [0.0; 4];
                if group.len() > 1 {
                    for r in &group {
                        for ((s, v), m) in var.iter_mut().zip(MetricSummary::of(&r.metrics).fields()).zip(mean) {
                            *s += (v - m) * (v - m) / (n - 1.0);
                        }
                    }
                }
                Aggregate {
                    variant: name.to_string(),
                    audio_encoder: group[0].audio_encoder,
                    modalities: group[0].modalities,
                    n_seeds: group.len(),
                    mean: MetricSummary::from_fields(mean),
                    std: MetricSummary::from_fields(var.map(f64::sqrt)),
                }
            })
            .collect();
        Self {
            provenance,
            rows,
            aggregates,
        }
    }

    /// One row per (variant, seed), then one `seed = mean` row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let line = |out: &mut String, variant: &str, enc: AudioEncoderKind, m: &ModalitySet, seed: &str, s: MetricSummary| {
            let b = |x: bool| if x { 1 } else { 0 };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
                variant,
                enc,
                b(m.audio),
                b(m.text),
                b(m.video),
                b(m.social),
                seed,
                s.accuracy,
                s.f1,
                s.precision,
                s.recall
            )
            .expect("write to string");
        };
        for r in &self.rows {
            line(
                &mut out,
                &r.variant,
                r.audio_encoder,
                &r.modalities,
                &r.seed.to_string(),
                MetricSummary::of(&r.metrics),
            );
        }
        for a in &self.aggregates {
            line(&mut out, &a.variant, a.audio_encoder, &a.modalities, "mean", a.mean);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable") + "\n"
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&json, self.to_json())?;
        Ok(vec![csv, json])
    }
}

/// Two-column `shift,accuracy` curve.
pub fn curve_csv(points: &[(i64, f64)]) -> String {
    let mut out = String::from("shift,accuracy\n");
    for (s, a) in points {
        writeln!(out, "{s},{a:.4}").expect("write to string");
    }
    out
}
