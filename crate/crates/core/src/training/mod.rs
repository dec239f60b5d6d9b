//! Focal-loss training with AdamW, early stopping on validation loss, and
//! classification metrics.

mod metrics;
mod optim;

pub use metrics::{
    compute_metrics, detection_report, f1_score, ClassMetrics, DetectionReport, MetricsError, MetricsReport,
};
pub use optim::{AdamW, AdamWConfig};

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{batch_features, WindowSample};
use crate::model::{forward, Mode, ModelConfig, ModelError, ModelParams};
use crate::tensor::{Graph, TensorError};

/// RNG stream reserved for weight initialization.
pub const INIT_STREAM: u64 = u64::MAX;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("history I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("history line {line}: {message}")]
    History { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            lr: adam.lr,
            batch: 128,
            max_epochs: 200,
            patience: 15,
            gamma: 2.0,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return fail("eps must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// ChaCha8 generator on an explicit stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<f32>, ModelError> {
    ModelParams::init(cfg, &mut stream_rng(seed, INIT_STREAM))
}

/// Per-class focal weights proportional to `1/√count`, scaled to mean 1 over
/// present classes. Absent classes take the largest present weight.
pub fn alpha_weights(counts: &[usize]) -> Result<Vec<f64>, TrainError> {
    let present: Vec<f64> = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| 1.0 / (c as f64).sqrt())
        .collect();
    if present.is_empty() {
        return Err(TrainError::Config("class counts are all zero".into()));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let max = present.iter().copied().fold(f64::MIN, f64::max) / mean;
    Ok(counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / (c as f64).sqrt() / mean } else { max })
        .collect())
}

pub fn alpha_f32(alpha: &[f64]) -> Vec<f32> {
    alpha.iter().map(|&a| a as f32).collect()
}

/// Proximal pull toward fixed anchor weights: adds `mu·(w − anchor)` to
/// every gradient.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a ModelParams<f32>,
    pub mu: f64,
}

/// Gradients of the mean focal loss over `indices`, with the batch loss.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    indices: &[usize],
    alpha: &[f32],
    gamma: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, Vec<Vec<f32>>), TrainError> {
    let labels: Vec<usize> = indices.iter().map(|&i| windows[i].label).collect();
    let mut graph = Graph::new();
    let input = batch_features(windows, indices);
    let trace = forward(&mut graph, params, cfg, input, Mode::Train(rng), true)?;
    let loss = graph.focal_loss(trace.logits, &labels, alpha, gamma)?;
    graph.backward(loss)?;
    let value = graph.value(loss).data()[0];
    let grads = trace
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| graph.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// One shuffled pass over `windows`. Returns the sample-weighted mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    params: &mut ModelParams<f32>,
    opt: &mut AdamW<f32>,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    alpha: &[f32],
    tc: &TrainConfig,
    prox: Option<Proximal<'_>>,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    let gamma = tc.gamma as f32;
    let mut total = 0.0f64;
    for (step, chunk) in order.chunks(tc.batch).enumerate() {
        let (loss, mut grads) = batch_gradients(params, cfg, windows, chunk, alpha, gamma, rng)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                detail: format!("loss {loss} at step {step}"),
            });
        }
        if let Some(p) = prox {
            let mu = p.mu as f32;
            for ((g, w), a) in grads.iter_mut().zip(params.tensors()).zip(p.anchor.tensors()) {
                for ((g, &w), &a) in g.iter_mut().zip(w.data()).zip(a.data()) {
                    *g += mu * (w - a);
                }
            }
        }
        opt.step(params, &grads);
        total += loss as f64 * chunk.len() as f64;
    }
    if !params.is_finite() {
        return Err(TrainError::Diverged {
            epoch,
            detail: "non-finite weights after update".into(),
        });
    }
    Ok(total / windows.len() as f64)
}

/// Eval-mode loss and predictions over a window set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    alpha: &[f32],
    gamma: f64,
) -> Result<Evaluation, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyData("evaluation"));
    }
    let indices: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0f64;
    let mut predictions = Vec::with_capacity(windows.len());
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut graph = Graph::new();
        let trace = forward(
            &mut graph,
            params,
            cfg,
            batch_features(windows, chunk),
            Mode::Eval,
            false,
        )?;
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let loss = graph.focal_loss(trace.logits, &batch_labels, alpha, gamma as f32)?;
        total += graph.value(loss).data()[0] as f64 * chunk.len() as f64;
        predictions.extend(crate::model::classify(graph.value(trace.logits)).classes);
    }
    Ok(Evaluation {
        loss: total / windows.len() as f64,
        predictions,
        labels,
    })
}

/// Tracks the best validation loss and a snapshot taken at that epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopState<S> {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    since_improvement: usize,
    best: Option<S>,
}

impl<S> EarlyStopState<S> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            best: None,
        }
    }

    /// Records an epoch; returns true when training should stop. Only a
    /// strictly lower loss counts as improvement.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, snapshot: impl FnOnce() -> S) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            self.best = Some(snapshot());
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }

    pub fn into_best(self) -> Option<S> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Centralized training with early stopping on validation loss.
pub fn train(
    initial: ModelParams<f32>,
    cfg: &ModelConfig,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    alpha: &[f32],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let names: Vec<String> = (0..cfg.n_classes).map(|c| c.to_string()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut params = initial;
    let mut rng = stream_rng(tc.seed, 0);
    let mut opt = AdamW::new(tc.adamw());
    let mut early = EarlyStopState::new(tc.patience);
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=tc.max_epochs {
        let train_loss = train_epoch(&mut params, &mut opt, cfg, train_set, alpha, tc, None, &mut rng, epoch)?;
        let ev = evaluate(&params, cfg, val_set, alpha, tc.gamma)?;
        if !ev.loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                detail: format!("validation loss {}", ev.loss),
            });
        }
        let report = compute_metrics(&ev.predictions, &ev.labels, &names)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: ev.loss,
            val_macro_f1: report.macro_f1,
        };
        on_epoch(&record);
        history.push(record);
        if early.observe(epoch, ev.loss, || params.clone()) {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = early.best_epoch();
    let params = early.into_best().unwrap_or(params);
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Fixed-epoch training without validation, used for local client updates.
/// Returns the per-epoch training losses.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    params: &mut ModelParams<f32>,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    alpha: &[f32],
    tc: &TrainConfig,
    epochs: usize,
    prox: Option<Proximal<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    tc.validate()?;
    let mut opt = AdamW::new(tc.adamw());
    (1..=epochs)
        .map(|epoch| train_epoch(params, &mut opt, cfg, windows, alpha, tc, prox, rng, epoch))
        .collect()
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_macro_f1";

pub fn write_history_csv<W: Write>(history: &[EpochRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_macro_f1)?;
    }
    Ok(())
}

pub fn read_history_csv<R: BufRead>(input: R) -> Result<Vec<EpochRecord>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let err = |message: String| TrainError::History { line: i + 1, message };
        if i == 0 {
            if line.trim() != HISTORY_HEADER {
                return Err(err(format!("expected header `{HISTORY_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
        out.push(EpochRecord {
            epoch: f[0].trim().parse().map_err(|_| err(format!("bad epoch `{}`", f[0])))?,
            train_loss: num(f[1])?,
            val_loss: num(f[2])?,
            val_macro_f1: num(f[3])?,
        });
    }
    Ok(out)
}
