//! Flag parsing and exit-code mapping for the `mmfd` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mmfd_core::datagen::{load_corpus, CorpusSpec};
use mmfd_core::fusion::{AudioEncoderKind, ModalitySet, ModelConfig};
use mmfd_core::train::TrainConfig;

use crate::commands::{
    cmd_ablate, cmd_compare_audio, cmd_eval, cmd_gen, cmd_gradcheck, cmd_misalign, cmd_train, GradcheckFailed,
    GradcheckModel, SplitName, CURVE_FILE,
};
use crate::plan::{ExperimentPlan, PlanError, Variant};
use crate::report::curve_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mmfd", version, about = "Multimodal misinformation detection experiments on synthetic corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus file.
    Gen(GenArgs),
    /// Train one model; writes model.ckpt and history.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Retrain per modality combination and report test metrics.
    Ablate(PlanArgs),
    /// Run every audio mask once with the vgg and once with the w2v encoder.
    CompareAudio(PlanArgs),
    /// Train on aligned data, then evaluate with shifted test audio.
    Misalign(PlanArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Default)]
pub struct SpecArgs {
    /// Full corpus spec as JSON; individual flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub n_topics: Option<u32>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub fake_fraction: Option<f64>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    /// Place a different-topic tone outside the signal window.
    #[arg(long)]
    pub decoy: bool,
    #[arg(long)]
    pub social_signal: Option<f64>,
}

impl SpecArgs {
    fn is_set(&self) -> bool {
        self.spec.is_some()
            || self.n_samples.is_some()
            || self.n_topics.is_some()
            || self.noise.is_some()
            || self.fake_fraction.is_some()
            || self.corpus_seed.is_some()
            || self.decoy
            || self.social_signal.is_some()
    }

    pub fn resolve(&self) -> Result<CorpusSpec> {
        let mut spec: CorpusSpec = match &self.spec {
            Some(p) => read_json(p)?,
            None => CorpusSpec::default(),
        };
        if let Some(v) = self.n_samples {
            spec.n_samples = v;
        }
        if let Some(v) = self.n_topics {
            spec.n_topics = v;
        }
        if let Some(v) = self.noise {
            spec.noise_level = v;
        }
        if let Some(v) = self.fake_fraction {
            spec.fake_fraction = v;
        }
        if let Some(v) = self.corpus_seed {
            spec.seed = v;
        }
        if let Some(v) = self.social_signal {
            spec.social_signal = v;
        }
        spec.decoy |= self.decoy;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, mut t: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.optimizer.lr = v;
        }
        t
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Model config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Modality mask, e.g. `text+audio` or `all`.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub audio_encoder: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Whole plan as JSON. Other flags override its fields.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Base model config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated `MASK[:ENCODER]` list; masks join groups with `+`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub shifts: Vec<i64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl PlanArgs {
    pub fn resolve(&self, default_variant: &str) -> Result<ExperimentPlan> {
        let mut plan = match &self.plan {
            Some(p) => read_json::<ExperimentPlan>(p)?,
            None => ExperimentPlan {
                corpus: None,
                generate: None,
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                variants: vec![Variant::parse(default_variant)?],
                seeds: vec![0],
                shifts: vec![0, 1, 2, 3, 4],
                out: None,
            },
        };
        if let Some(c) = &self.corpus {
            plan.corpus = Some(c.clone());
            plan.generate = None;
        } else if self.spec.is_set() || (plan.corpus.is_none() && plan.generate.is_none()) {
            plan.generate = Some(self.spec.resolve()?);
        }
        if let Some(c) = &self.config {
            plan.model = read_json(c)?;
        }
        if !self.variants.is_empty() {
            plan.variants = self.variants.iter().map(|v| Variant::parse(v)).collect::<Result<_, _>>()?;
        }
        if !self.seeds.is_empty() {
            plan.seeds = self.seeds.clone();
        }
        if !self.shifts.is_empty() {
            plan.shifts = self.shifts.clone();
        }
        plan.train = self.train.apply(plan.train);
        if let Some(o) = &self.out {
            plan.out = Some(o.clone());
        }
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "fusion")]
    pub model: GradcheckModel,
    /// Model config JSON; defaults to the minimal all-modality config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| PlanError(format!("{}: {e}", path.display())).into())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn out_dir(plan: &ExperimentPlan) -> PathBuf {
    plan.out.clone().unwrap_or_else(|| PathBuf::from("results"))
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let spec = a.spec.resolve()?;
            let corpus = cmd_gen(&spec, &a.out)?;
            println!("wrote {} samples to {}", corpus.samples.len(), a.out.display());
        }
        Command::Train(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let mut cfg: ModelConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => ModelConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if a.modalities.is_some() || a.audio_encoder.is_some() {
                let mask: ModalitySet = match &a.modalities {
                    Some(m) => m.parse()?,
                    None => cfg.modalities,
                };
                let enc: AudioEncoderKind = match &a.audio_encoder {
                    Some(e) => e.parse()?,
                    None if mask.audio && cfg.audio_encoder == AudioEncoderKind::None => AudioEncoderKind::W2v,
                    None => cfg.audio_encoder,
                };
                if !mask.audio && enc != AudioEncoderKind::None && a.audio_encoder.is_some() {
                    return Err(PlanError(format!("audio encoder {enc} given but audio is disabled")).into());
                }
                cfg = cfg.with_modalities(mask, enc);
            }
            let train_cfg = a.train.apply(TrainConfig::default());
            let (_, history) = cmd_train(&corpus, &cfg, &train_cfg, &a.out)?;
            match history.best() {
                Some(b) => println!("best epoch {} val accuracy {:.4}", b.epoch, b.val.accuracy),
                None => println!("no epochs run; stored the initial model"),
            }
        }
        Command::Eval(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let metrics = cmd_eval(&a.checkpoint, &corpus, a.split)?;
            if let Some(p) = &a.out {
                write_json(p, &metrics)?;
            }
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate(a) => {
            let plan = a.resolve("text")?;
            let table = cmd_ablate(&plan)?;
            report_written(&table.write(&out_dir(&plan), "ablate")?);
            print!("{}", table.to_csv());
        }
        Command::CompareAudio(a) => {
            let plan = a.resolve("text+audio")?;
            let table = cmd_compare_audio(&plan)?;
            report_written(&table.write(&out_dir(&plan), "compare_audio")?);
            print!("{}", table.to_csv());
        }
        Command::Misalign(a) => {
            let plan = a.resolve("text+audio+video")?;
            let res = cmd_misalign(&plan)?;
            let dir = out_dir(&plan);
            let mut paths = res.table.write(&dir, "misalign")?;
            let curve = dir.join(CURVE_FILE);
            std::fs::write(&curve, curve_csv(&res.curve))?;
            paths.push(curve);
            report_written(&paths);
            print!("{}", curve_csv(&res.curve));
        }
        Command::Gradcheck(a) => {
            let cfg = match &a.config {
                Some(p) => read_json(p)?,
                None => ModelConfig::minimal(),
            };
            let outcome = cmd_gradcheck(a.model, &cfg, a.samples, a.eps, a.threshold);
            let report = match &outcome {
                Ok(r) => r.clone(),
                Err(e) => match e.downcast_ref::<GradcheckFailed>() {
                    Some(f) => f.0.clone(),
                    None => return outcome.map(|_| ()),
                },
            };
            if let Some(p) = &a.out {
                write_json(p, &report)?;
            }
            println!(
                "checked {} gradients: max_rel_err {:.3e}, max_abs_err {:.3e}, worst {}",
                report.checked, report.max_rel_err, report.max_abs_err, report.worst_param
            );
            outcome?;
        }
    }
    Ok(())
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use mmfd_core::Error as E;
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return EXIT_NUMERIC;
    }
    if err.downcast_ref::<PlanError>().is_some() {
        return EXIT_INVALID;
    }
    match err.downcast_ref::<E>() {
        Some(E::Divergence { .. } | E::NonFinite(_) | E::OracleInvalid(_)) => EXIT_NUMERIC,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
