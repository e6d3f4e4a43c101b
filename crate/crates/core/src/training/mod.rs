//! The training regimen: dual-LR AdamW over shuffled mini-batches, linear
//! warmup with inverse-square-root (or linear) decay, dev evaluation every
//! `eval_every` batches, and early stopping on dev macro-F1 with
//! best-checkpoint restoration.

mod checkpoint;
mod optimizer;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use optimizer::{adamw_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::lr_multiplier;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EncodedExample;
use crate::encoder::{
    stable_hash64, ForwardSession, Model, ParamKind, Phase, TrainMode,
};
use crate::eval::{self, EvalReport, ProbDist};
use crate::numerics::{NumericsError, Scalar, Tape};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("mode = adapter but the model has no adapters")]
    AdapterModeWithoutAdapters,
    #[error("label id {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint tensor {name}: {detail}")]
    TensorMismatch { name: String, detail: String },
    #[error("checkpoint blob truncated at tensor {name}")]
    TruncatedBlob { name: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Decay shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InvSqrt,
    Linear,
}

/// The full training regimen. Defaults are the reference configuration:
/// batches of 32, evaluation every 100 batches, patience 10, 250 warmup
/// steps, head LR 1e-2 vs 5e-6 for the rest, decay quantum 10, floor ratio
/// 0.01, weight decay 0.01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Run a dev evaluation every this many mini-batches.
    pub eval_every: usize,
    /// Halt after this many consecutive evaluations without improvement.
    pub patience: usize,
    pub warmup_steps: u64,
    pub lr_head: f64,
    pub lr_rest: f64,
    /// The factor never drops below this fraction of the base LR.
    pub lr_floor_ratio: f64,
    /// Inverse-square-root decay advances once per this many updates.
    pub decay_quantum: u64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            eval_every: 100,
            patience: 10,
            warmup_steps: 250,
            lr_head: 1e-2,
            lr_rest: 5e-6,
            lr_floor_ratio: 0.01,
            decay_quantum: 10,
            schedule: Schedule::InvSqrt,
            weight_decay: 0.01,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be positive".into());
        }
        if self.patience == 0 {
            problems.push("patience must be positive".into());
        }
        if self.warmup_steps == 0 {
            problems.push("warmup_steps must be positive".into());
        }
        if self.decay_quantum == 0 {
            problems.push("decay_quantum must be positive".into());
        }
        for (name, lr) in [("lr_head", self.lr_head), ("lr_rest", self.lr_rest)] {
            if !(lr.is_finite() && lr > 0.0) {
                problems.push(format!("{} must be positive", name));
            }
        }
        if !(self.lr_floor_ratio > 0.0 && self.lr_floor_ratio < 1.0) {
            problems.push(format!(
                "lr_floor_ratio {} must lie in (0, 1)",
                self.lr_floor_ratio
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push("weight_decay must be nonnegative".into());
        }
        if self.schedule == Schedule::Linear && self.max_steps.is_none() {
            problems.push("linear schedule requires max_steps".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainingError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Names of the parameters a run may update. Fine-tuning trains everything;
/// adapter mode trains only adapters, the classification head, and (when
/// present) the vertical-attention parameters.
pub fn trainable_mask<S: Scalar>(model: &Model<S>, mode: TrainMode) -> Result<BTreeSet<String>> {
    match mode {
        TrainMode::FineTune => Ok(model.params().iter().map(|p| p.name.clone()).collect()),
        TrainMode::Adapter => {
            if !model.config.adapter_enabled {
                return Err(TrainingError::AdapterModeWithoutAdapters);
            }
            Ok(model
                .params()
                .iter()
                .filter(|p| {
                    matches!(
                        p.kind,
                        ParamKind::Adapter | ParamKind::VAtt | ParamKind::Classifier
                    )
                })
                .map(|p| p.name.clone())
                .collect())
        }
    }
}

/// Early-stopping bookkeeping. Improvement is strict; the first evaluation
/// always counts as one.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    best_f1: Option<f64>,
    evals_since_improvement: usize,
    patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// Keep going; `improved` is true when this evaluation set a new best.
    Continue { improved: bool },
    /// Patience exhausted.
    Halt,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_f1: None,
            evals_since_improvement: 0,
            patience,
        }
    }

    pub fn best_f1(&self) -> Option<f64> {
        self.best_f1
    }
}

/// Record one dev macro-F1. Ties count as non-improvement; halting happens
/// exactly when `patience` consecutive evaluations fail to improve.
pub fn early_stop_update(state: &mut EarlyStopState, dev_f1: f64) -> StopDecision {
    let improved = state.best_f1.map_or(true, |best| dev_f1 > best);
    if improved {
        state.best_f1 = Some(dev_f1);
        state.evals_since_improvement = 0;
        StopDecision::Continue { improved: true }
    } else {
        state.evals_since_improvement += 1;
        if state.evals_since_improvement >= state.patience {
            StopDecision::Halt
        } else {
            StopDecision::Continue { improved: false }
        }
    }
}

/// One line of the training log, written at every dev evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub train_loss: f64,
    pub lr_factor: f64,
    pub dev_accuracy: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
}

impl TrainLog {
    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// What a finished run hands back: the best model by dev macro-F1 (not the
/// last), its dev report, and the evaluation log.
pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub best_report: EvalReport,
    pub log: TrainLog,
}

fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash64(stream))
}

/// Forward one mini-batch on a fresh tape; returns the tape, the parameter
/// bindings, and the mean cross-entropy loss tensor.
fn forward_batch<'m, S: Scalar>(
    model: &'m Model<S>,
    batch: &[&EncodedExample],
    trainable: Option<&BTreeSet<String>>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tape<S>, Vec<(String, crate::numerics::TensorRef)>, crate::numerics::TensorRef)> {
    let mut tape: Tape<S> = Tape::new();
    let phase = match rng {
        Some(rng) => Phase::Train { rng },
        None => Phase::Eval,
    };
    let mut sess = ForwardSession::new(&mut tape, trainable, phase);
    let classes = model.config.num_classes;
    let mut logits = Vec::with_capacity(batch.len());
    let mut golds = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.label_id >= classes {
            return Err(TrainingError::LabelOutOfRange(ex.label_id, classes));
        }
        // Only the unmasked prefix goes through the encoder; masked keys
        // would contribute exactly zero attention weight anyway.
        let seq = ex.seq_len();
        let out = model.forward_example(&mut sess, &ex.token_ids[..seq], &ex.attention_mask[..seq])?;
        logits.push(out.logits);
        golds.push(ex.label_id);
    }
    let stacked = sess.tape.concat(&logits, 0)?;
    let loss = sess.tape.cross_entropy(stacked, &golds)?;
    let bindings = sess.bindings().to_vec();
    Ok((tape, bindings, loss))
}

fn collect_grads<S: Scalar>(
    tape: &Tape<S>,
    bindings: &[(String, crate::numerics::TensorRef)],
) -> BTreeMap<String, Vec<S>> {
    let mut grads = BTreeMap::new();
    for (name, node) in bindings {
        if tape.requires_grad(*node) {
            if let Some(g) = tape.grad(*node) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
    }
    grads
}

/// Eval-mode class probabilities (and vertical-attention weights, when the
/// model pools with them) for every example.
pub fn predict_probs<S: Scalar>(
    model: &Model<S>,
    dataset: &[EncodedExample],
) -> Result<Vec<(ProbDist, Option<Vec<f64>>)>> {
    let mut out = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let mut tape: Tape<S> = Tape::new();
        let mut sess = ForwardSession::new(&mut tape, None, Phase::Eval);
        let seq = ex.seq_len();
        let forward =
            model.forward_example(&mut sess, &ex.token_ids[..seq], &ex.attention_mask[..seq])?;
        let probs_ref = sess.tape.softmax(forward.logits)?;
        // f32 softmax can underflow a tail class to exactly zero; the
        // distribution floor keeps entries strictly positive (argmax is
        // unaffected, the sum moves by at most C * 1e-12).
        let probs: Vec<f64> = tape
            .value(probs_ref)
            .iter()
            .map(|&v| v.to_f64().max(crate::eval::ENSEMBLE_PROB_FLOOR))
            .collect();
        let alpha = forward
            .alpha
            .map(|a| tape.value(a).iter().map(|&v| v.to_f64()).collect());
        out.push((ProbDist::new(probs)?, alpha));
    }
    Ok(out)
}

/// Dropout-free forward over a dataset, reduced to the usual metric bundle.
pub fn evaluate<S: Scalar>(model: &Model<S>, dataset: &[EncodedExample]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let probs = predict_probs(model, dataset)?;
    let pred: Vec<usize> = probs.iter().map(|(d, _)| d.argmax()).collect();
    let gold: Vec<usize> = dataset.iter().map(|ex| ex.label_id).collect();
    Ok(eval::report(&gold, &pred, model.config.num_classes)?)
}

/// Run the full regimen and return the best checkpoint.
///
/// Mini-batches come from a fresh full-corpus shuffle each epoch (seeded);
/// every `eval_every` batches the dev set is scored and early stopping
/// updated. Training ends when patience runs out or `max_steps` is reached.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    train_set: &[EncodedExample],
    dev_set: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    model.config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    if model.config.num_classes < 2 {
        return Err(TrainingError::TooFewClasses(model.config.num_classes));
    }
    let mask = trainable_mask(&model, model.config.mode)?;
    let mut optimizer: OptimizerState<S> = OptimizerState::new();
    let mut shuffle_rng = stream_rng(config.seed, "shuffle");
    let mut dropout_rng = stream_rng(config.seed, "dropout");
    let mut early = EarlyStopState::new(config.patience);
    let mut log = TrainLog::default();
    let mut best: Option<(Model<S>, EvalReport)> = None;
    let mut global_step: u64 = 0;

    'training: loop {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            global_step += 1;
            let factor = lr_multiplier(global_step, config)?;
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (mut tape, bindings, loss) =
                forward_batch(&model, &batch, Some(&mask), Some(&mut dropout_rng))?;
            let train_loss = tape.scalar_value(loss)?.to_f64();
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &bindings);
            adamw_step(
                &mut model,
                &grads,
                &mut optimizer,
                config.lr_head * factor,
                config.lr_rest * factor,
                config.weight_decay,
            )?;

            if global_step % config.eval_every as u64 == 0 {
                let report = evaluate(&model, dev_set)?;
                let decision = early_stop_update(&mut early, report.macro_f1);
                log.records.push(EvalRecord {
                    step: global_step,
                    train_loss,
                    lr_factor: factor,
                    dev_accuracy: report.accuracy,
                    dev_macro_f1: report.macro_f1,
                });
                match decision {
                    StopDecision::Continue { improved: true } => {
                        best = Some((model.clone(), report));
                    }
                    StopDecision::Continue { improved: false } => {}
                    StopDecision::Halt => break 'training,
                }
            }
            if let Some(max) = config.max_steps {
                if global_step >= max {
                    break 'training;
                }
            }
        }
    }

    // A run shorter than eval_every never evaluated; score the final model
    // so the outcome always carries a dev report.
    let (best_model, best_report) = match best {
        Some(pair) => pair,
        None => {
            let report = evaluate(&model, dev_set)?;
            log.records.push(EvalRecord {
                step: global_step,
                train_loss: f64::NAN,
                lr_factor: lr_multiplier(global_step.max(1), config)?,
                dev_accuracy: report.accuracy,
                dev_macro_f1: report.macro_f1,
            });
            (model, report)
        }
    };
    Ok(TrainOutcome {
        model: best_model,
        best_report,
        log,
    })
}
