//! The experiment commands, callable in-process. The clap layer in
//! [`crate::cli`] only maps flags onto these.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mmfd_core::datagen::{generate_corpus, inject_misalignment, save_corpus, Corpus, CorpusSpec, MultimodalSample};
use mmfd_core::fusion::{save_checkpoint, load_checkpoint, AudioEncoderKind, Model, ModelConfig};
use mmfd_core::gradcheck::{grad_check, GradReport};
use mmfd_core::train::{chronological_split, cross_entropy, evaluate, grad_check_model, train_on_split, MetricsReport, Split, TrainConfig, TrainHistory};
use mmfd_core::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::plan::{ExperimentPlan, PlanError, Variant};
use crate::report::{sha256_json, Provenance, ResultRow, ResultTable};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const CURVE_FILE: &str = "curve.csv";

/// A gradient check came back above its threshold. Maps to exit code 3.
#[derive(Debug)]
pub struct GradcheckFailed(pub GradReport, pub f64);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient check failed: max_rel_err {:.3e} >= threshold {:.1e} at {}",
            self.0.max_rel_err, self.1, self.0.worst_param
        )
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn cmd_gen(spec: &CorpusSpec, out: &Path) -> Result<Corpus> {
    let corpus = generate_corpus(spec)?;
    save_corpus(&corpus, out).with_context(|| format!("writing corpus to {}", out.display()))?;
    Ok(corpus)
}

/// Trains on the chronological train split and writes the selected model
/// plus its history into `out_dir`. `epochs = 0` stores the initial model.
pub fn cmd_train(corpus: &Corpus, config: &ModelConfig, train_cfg: &TrainConfig, out_dir: &Path) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    let split = chronological_split(&corpus.samples)?;
    let (model, history) = train_on_split(config, train_cfg, &split.train, &split.val)?;
    std::fs::create_dir_all(out_dir)?;
    save_checkpoint(&model, out_dir.join(CHECKPOINT_FILE))?;
    std::fs::write(out_dir.join(HISTORY_FILE), history.to_json()? + "\n")?;
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

pub fn select_split(corpus: &Corpus, which: SplitName) -> Result<Vec<MultimodalSample>> {
    if which == SplitName::All {
        return Ok(corpus.samples.clone());
    }
    let Split { train, val, test } = chronological_split(&corpus.samples)?;
    Ok(match which {
        SplitName::Train => train,
        SplitName::Val => val,
        _ => test,
    })
}

pub fn cmd_eval(checkpoint: &Path, corpus: &Corpus, which: SplitName) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(evaluate(&model, &select_split(corpus, which)?)?)
}

fn provenance(command: &str, plan: &ExperimentPlan, corpus: &Corpus) -> Provenance {
    // File locations do not change results, so they stay out of the hash; the
    // corpus is identified by its spec hash instead.
    let hashed = ExperimentPlan {
        out: None,
        corpus: None,
        ..plan.clone()
    };
    Provenance::new(command, sha256_json(&hashed), sha256_json(&corpus.spec), plan.seeds.clone())
}

fn train_variant(plan: &ExperimentPlan, v: &Variant, seed: u64, split: &Split) -> Result<(Model, f64)> {
    let cfg = plan.variant_config(v, seed)?;
    let t = Instant::now();
    let (model, history) = train_on_split(&cfg, &plan.train, &split.train, &split.val)?;
    let secs = t.elapsed().as_secs_f64();
    let best = history.best().map_or(f64::NAN, |b| b.val.accuracy);
    eprintln!("{:<28} seed {:<4} val {:.4} ({secs:.1}s)", v.name, seed, best);
    Ok((model, secs))
}

fn run_grid(command: &str, plan: &ExperimentPlan, variants: &[Variant]) -> Result<ResultTable> {
    let corpus = plan.load_corpus()?;
    let split = chronological_split(&corpus.samples)?;
    let mut rows = Vec::new();
    for v in variants {
        for &seed in &plan.seeds {
            let (model, secs) = train_variant(plan, v, seed, &split)?;
            rows.push(ResultRow {
                variant: v.name.clone(),
                audio_encoder: v.audio_encoder,
                modalities: v.mask()?,
                seed,
                metrics: evaluate(&model, &split.test)?,
                wall_clock_secs: secs,
            });
        }
    }
    Ok(ResultTable::new(provenance(command, plan, &corpus), rows))
}

/// One trained model per (variant, seed), evaluated on the shared test split.
pub fn cmd_ablate(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    run_grid("ablate", plan, &plan.variants)
}

/// Each distinct modality mask in the plan becomes a vgg arm and a w2v arm.
pub fn compare_audio_arms(plan: &ExperimentPlan) -> Result<Vec<Variant>, PlanError> {
    let mut masks = Vec::new();
    for v in &plan.variants {
        let m = v.mask()?;
        if !m.audio {
            return Err(PlanError(format!("compare-audio variant {} does not use audio", v.name)));
        }
        if !masks.contains(&m) {
            masks.push(m);
        }
    }
    let mut arms = Vec::new();
    for m in masks {
        for enc in [AudioEncoderKind::Vgg, AudioEncoderKind::W2v] {
            arms.push(Variant {
                name: format!("{}/{}", m.label(), enc),
                modalities: m.label(),
                audio_encoder: enc,
            });
        }
    }
    Ok(arms)
}

pub fn cmd_compare_audio(plan: &ExperimentPlan) -> Result<ResultTable> {
    let arms = compare_audio_arms(plan)?;
    let expanded = ExperimentPlan {
        variants: arms.clone(),
        ..plan.clone()
    };
    expanded.validate()?;
    run_grid("compare-audio", &expanded, &arms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MisalignResult {
    pub table: ResultTable,
    /// `(shift, mean test accuracy over seeds)` in plan order.
    pub curve: Vec<(i64, f64)>,
}

/// Trains the plan's single variant on aligned data, then evaluates the test
/// split with the audio of every test sample circularly shifted.
pub fn cmd_misalign(plan: &ExperimentPlan) -> Result<MisalignResult> {
    plan.validate()?;
    let [variant] = plan.variants.as_slice() else {
        bail!(PlanError(format!("misalign takes exactly one variant, got {}", plan.variants.len())));
    };
    if plan.shifts.is_empty() {
        bail!(PlanError("misalign needs at least one shift".into()));
    }
    let corpus = plan.load_corpus()?;
    let hop = corpus.spec.mel.hop;
    let frames = corpus.spec.n_hops as i64;
    if let Some(s) = plan.shifts.iter().find(|s| s.abs() > frames) {
        bail!(PlanError(format!("shift {s} exceeds the {frames} audio frames")));
    }
    let split = chronological_split(&corpus.samples)?;
    let mut rows = Vec::new();
    let mut sums = vec![0.0; plan.shifts.len()];
    for &seed in &plan.seeds {
        let (model, secs) = train_variant(plan, variant, seed, &split)?;
        for (k, &shift) in plan.shifts.iter().enumerate() {
            let shifted = split
                .test
                .iter()
                .map(|s| inject_misalignment(s, shift, hop))
                .collect::<mmfd_core::Result<Vec<_>>>()?;
            let metrics = evaluate(&model, &shifted)?;
            sums[k] += metrics.accuracy;
            rows.push(ResultRow {
                variant: format!("{}@shift{shift}", variant.name),
                audio_encoder: variant.audio_encoder,
                modalities: variant.mask()?,
                seed,
                metrics,
                wall_clock_secs: secs,
            });
        }
    }
    // Keep rows grouped by shift, then seed.
    let n_shifts = plan.shifts.len();
    let mut ordered = Vec::with_capacity(rows.len());
    for k in 0..n_shifts {
        ordered.extend(rows.iter().skip(k).step_by(n_shifts).cloned());
    }
    let n = plan.seeds.len() as f64;
    let curve = plan.shifts.iter().zip(sums).map(|(&s, a)| (s, a / n)).collect();
    Ok(MisalignResult {
        table: ResultTable::new(provenance("misalign", plan, &corpus), ordered),
        curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GradcheckModel {
    /// The full fusion network on a small generated batch.
    Fusion,
    /// A single linear layer under softmax cross-entropy.
    Linear,
}

/// Runs the finite-difference oracle; fails with [`GradcheckFailed`] when
/// `max_rel_err >= threshold`.
pub fn cmd_gradcheck(which: GradcheckModel, config: &ModelConfig, samples: usize, eps: f64, threshold: f64) -> Result<GradReport> {
    let report = match which {
        GradcheckModel::Fusion => {
            config.validate()?;
            let spec = CorpusSpec {
                n_samples: samples.max(2),
                seed: config.seed,
                ..CorpusSpec::default()
            };
            let corpus = generate_corpus(&spec)?;
            let model = Model::new(config.clone())?;
            grad_check_model(&model, &corpus.samples[..samples.max(1)], eps)?
        }
        GradcheckModel::Linear => linear_gradcheck(eps)?,
    };
    if !(report.max_rel_err < threshold) {
        bail!(GradcheckFailed(report, threshold));
    }
    Ok(report)
}

fn linear_gradcheck(eps: f64) -> Result<GradReport> {
    let inputs: Vec<(Tensor, u8)> = (0..4)
        .map(|i| {
            let x = (0..3).map(|j| ((i * 3 + j) as f64 * 0.91).sin()).collect();
            (Tensor::vector(x), (i % 2) as u8)
        })
        .collect();
    let w = Tensor::new(vec![3, 2], (0..6).map(|i| (i as f64 * 0.53).cos() * 0.5).collect())?;
    let b = Tensor::vector(vec![0.1, -0.2]);
    let report = grad_check(
        |g: &mut Graph, p| {
            let mut total = None;
            for (x, y) in &inputs {
                let x = g.constant(x.clone());
                let xr = g.reshape(x, &[1, 3])?;
                let z = g.matmul(xr, p[0])?;
                let z = g.reshape(z, &[2])?;
                let z = g.add(z, p[1])?;
                let l = cross_entropy(g, z, *y)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("non-empty"))
        },
        &mut [w, b],
        eps,
    )?;
    Ok(report)
}
