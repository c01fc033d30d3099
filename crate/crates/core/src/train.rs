//! Cross-entropy training with AdamW, chronological splitting, best-epoch
//! selection on validation accuracy, and macro-averaged metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalSample;
use crate::error::{Error, Result};
use crate::fusion::{Model, ModelConfig};
use crate::graph::{Graph, Var};
use crate::gradcheck::{grad_check_named, GradReport};
use crate::nn::{Dropout, Session};
use crate::tensor::Tensor;

/// `-log softmax(logits)[label]` for 2-class logits.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: u8) -> Result<Var> {
    if label > 1 {
        return Err(Error::Input(format!("label {label} is not 0 or 1")));
    }
    if g.shape(logits) != [2] {
        return Err(Error::dim("cross_entropy", format!("expected 2 logits, got {:?}", g.shape(logits))));
    }
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite("cross_entropy logits"));
    }
    let row = g.reshape(logits, &[1, 2])?;
    let ls = g.log_softmax_rows(row)?;
    let picked = g.select(ls, label as usize)?;
    Ok(g.scale(picked, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Result<Self> {
        let c = &config;
        if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) {
            return Err(Error::Input(format!("betas ({}, {}) outside [0, 1)", c.beta1, c.beta2)));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }
}

/// One decoupled-weight-decay Adam update:
/// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`.
pub fn adamw_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamWState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "adamw: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || p.numel() != state.m[i].len() {
            return Err(Error::shape("adamw", p.shape(), &[g.len()]));
        }
    }
    state.t += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pi);
        }
    }
    Ok(())
}

/// `(train, val, test)` sizes under the floor-floor-remainder 70:15:15 rule.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

/// Stable-sorts by timestamp and cuts contiguous 70:15:15 blocks.
pub fn chronological_split(dataset: &[MultimodalSample]) -> Result<Split> {
    let n = dataset.len();
    if n < 3 {
        return Err(Error::Input(format!("need at least 3 samples to split, got {n}")));
    }
    let mut sorted = dataset.to_vec();
    sorted.sort_by_key(|s| s.timestamp);
    let (a, b, _) = split_sizes(n);
    let test = sorted.split_off(a + b);
    let val = sorted.split_off(a);
    Ok(Split {
        train: sorted,
        val,
        test,
    })
}

/// Confusion counts with fake (label 1) as the positive class, plus
/// macro-averaged precision, recall and F1 over {real, fake}. `f1` is the
/// mean of the two per-class F1 scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    pub const AVERAGING: &'static str = "macro";

    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        let (pf, rf) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let (pr, rr) = (ratio(tn, tn + fn_), ratio(tn, tn + fp));
        Self {
            accuracy: ratio(tp + tn, n),
            precision: (pf + pr) / 2.0,
            recall: (rf + rr) / 2.0,
            f1: (f1_of(pf, rf) + f1_of(pr, rr)) / 2.0,
            tp,
            fp,
            tn,
            fn_,
            n,
        }
    }

    pub fn from_predictions(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if predictions.is_empty() {
            return Err(Error::Input("cannot compute metrics of an empty set".into()));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 0) => tn += 1,
                (0, 1) => fn_ += 1,
                _ => return Err(Error::Input(format!("class pair ({p}, {l}) outside {{0, 1}}"))),
            }
        }
        Ok(Self::from_counts(tp, fp, tn, fn_))
    }

    pub fn fake_precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn fake_recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Binary F1 with fake as the positive class.
    pub fn fake_f1(&self) -> f64 {
        f1_of(self.fake_precision(), self.fake_recall())
    }
}

/// Deterministic evaluation: dropout off, argmax over the logits.
pub fn evaluate(model: &Model, samples: &[MultimodalSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty sample list".into()));
    }
    let preds = samples.iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    MetricsReport::from_predictions(&preds, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub averaging: String,
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected model; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|i| &self.epochs[i])
    }
}

/// Index of the first maximum of `scores`.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if s <= b => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
}

fn dropout_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    // splitmix64 over a packed counter
    let mut z = seed ^ ((epoch as u64) << 40) ^ sample as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward + backward over one batch, then one AdamW step. Returns the mean
/// loss. `dropout_key` derives per-sample dropout masks; `None` disables
/// dropout.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamWState,
    batch: &[&MultimodalSample],
    dropout_key: Option<(u64, usize)>,
) -> Result<f64> {
    let rate = model.config().dropout;
    let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (j, sample) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let dropout = dropout_key.map(|(seed, epoch)| Dropout::new(rate, dropout_seed(seed, epoch, j)));
        let mut s = model.session(&mut g, dropout);
        let trace = model.forward(&mut s, sample)?;
        let loss = cross_entropy(s.graph, trace.logits, sample.label)?;
        let l = s.graph.value(loss).data()[0];
        if !l.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        total += l;
        s.graph.backward(loss)?;
        s.accumulate_grads(&mut grads, scale);
    }
    adamw_step(model.params_mut().tensors_mut(), &grads, state)?;
    Ok(total * scale)
}

/// Finite-difference check of every model parameter against the mean
/// cross-entropy over `batch`. Dropout is off.
pub fn grad_check_model(model: &Model, batch: &[MultimodalSample], eps: f64) -> Result<GradReport> {
    if batch.is_empty() {
        return Err(Error::Input("grad check needs at least one sample".into()));
    }
    let mut named: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    grad_check_named(
        |g, vars| {
            let mut s = Session::prebound(g, model.params(), vars);
            let mut total: Option<Var> = None;
            for sample in batch {
                let trace = model.forward(&mut s, sample)?;
                let l = cross_entropy(s.graph, trace.logits, sample.label)?;
                total = Some(match total {
                    Some(t) => s.graph.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("non-empty batch");
            Ok(s.graph.scale(total, scale))
        },
        &mut named,
        eps,
    )
}

/// Trains on the chronological train split, selects the epoch with the best
/// validation accuracy (ties to the earliest) and returns that model.
pub fn train(config: &ModelConfig, train_cfg: &TrainConfig, dataset: &[MultimodalSample]) -> Result<(Model, TrainHistory)> {
    let split = chronological_split(dataset)?;
    train_on_split(config, train_cfg, &split.train, &split.val)
}

pub fn train_on_split(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[MultimodalSample],
    val_set: &[MultimodalSample],
) -> Result<(Model, TrainHistory)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("train and validation splits must be non-empty".into()));
    }
    if train_cfg.batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let mut model = Model::new(config.clone())?;
    let mut state = AdamWState::new(train_cfg.optimizer, model.params().tensors())?;
    let mut history = TrainHistory {
        seed: config.seed,
        averaging: MetricsReport::AVERAGING.into(),
        config: config.clone(),
        train: train_cfg.clone(),
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best_params = model.params().clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..train_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&MultimodalSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let key = (dropout_seed(config.seed, epoch, b), epoch);
            let loss = match train_step(&mut model, &mut state, &batch, Some(key)) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || model.params().tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let val = evaluate(&model, val_set)?;
        let improved = history.best().map_or(true, |b| val.accuracy > b.val.accuracy);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val,
        });
        if improved {
            history.best_epoch = Some(epoch);
            best_params = model.params().clone();
        }
    }
    *model.params_mut() = best_params;
    Ok((model, history))
}
