//! Classification metrics, multiplicative softmax ensembling, and
//! sequence-length analyses.
//!
//! Everything here is a pure function over predictions; no model code is
//! involved, so ensembling can operate on prediction files written by
//! separate runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability floor applied before taking logs in the ensemble product, so a
/// zero from one member can neither veto irrecoverably nor underflow.
pub const ENSEMBLE_PROB_FLOOR: f64 = 1e-12;

/// Histogram tail cutoff: lengths above this pool into one overflow bucket.
pub const HISTOGRAM_MAX_LENGTH: usize = 30;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probability vector invalid: {0}")]
    InvalidDistribution(String),
    #[error("distribution length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label id {id} out of range for {classes} classes")]
    LabelOutOfRange { id: usize, classes: usize },
    #[error("gold and prediction lists have different lengths: {0} vs {1}")]
    UnalignedLists(usize, usize),
    #[error("accuracy undefined on an empty confusion matrix")]
    EmptyConfusion,
    #[error("erlang fit needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("erlang fit degenerate: sample variance is zero")]
    ZeroVariance,
    #[error("erlang fit needs positive samples")]
    NonPositiveSample,
    #[error("prediction file {path}: {reason}")]
    BadPredictionFile { path: String, reason: String },
    #[error("prediction files disagree on labels: {0:?} vs {1:?}")]
    LabelSetMismatch(Vec<String>, Vec<String>),
    #[error("prediction files misaligned at record {index}: id {a:?} vs {b:?}")]
    IdMisalignment { index: usize, a: String, b: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-class softmax probabilities for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates positivity and normalization (sum within 1e-6 of 1).
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(EvalError::InvalidDistribution("empty vector".into()));
        }
        if p.iter().any(|&v| !(v.is_finite() && v > 0.0 && v <= 1.0)) {
            return Err(EvalError::InvalidDistribution(format!(
                "entries must lie in (0, 1], got {:?}",
                p
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(EvalError::InvalidDistribution(format!(
                "sum {} not within 1e-6 of 1",
                sum
            )));
        }
        Ok(ProbDist(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Argmax with ties broken by the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Combine per-model distributions for one example by elementwise product,
/// computed in log space with a `1e-12` floor, then renormalized. The argmax
/// is unaffected by the normalization.
pub fn ensemble(dists: &[ProbDist]) -> Result<ProbDist> {
    let first = dists
        .first()
        .ok_or_else(|| EvalError::InvalidDistribution("no distributions to combine".into()))?;
    let classes = first.len();
    let mut log_sum = vec![0.0f64; classes];
    for d in dists {
        if d.len() != classes {
            return Err(EvalError::LengthMismatch(classes, d.len()));
        }
        for (acc, &p) in log_sum.iter_mut().zip(d.probs()) {
            *acc += p.max(ENSEMBLE_PROB_FLOOR).ln();
        }
    }
    let max = log_sum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnormalized: Vec<f64> = log_sum.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    ProbDist::new(unnormalized.into_iter().map(|v| v / total).collect())
}

/// `C x C` count matrix; rows are gold classes, columns predictions.
pub fn confusion_matrix(gold: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if gold.len() != pred.len() {
        return Err(EvalError::UnalignedLists(gold.len(), pred.len()));
    }
    let mut matrix = vec![vec![0u64; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= classes {
            return Err(EvalError::LabelOutOfRange { id: g, classes });
        }
        if p >= classes {
            return Err(EvalError::LabelOutOfRange { id: p, classes });
        }
        matrix[g][p] += 1;
    }
    Ok(matrix)
}

/// Unweighted mean of per-class F1 over every configured class; any 0/0
/// precision, recall, or F1 counts as 0. Returns `(macro, per_class)`.
pub fn macro_f1(confusion: &[Vec<u64>]) -> (f64, Vec<f64>) {
    let classes = confusion.len();
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let row_sum: f64 = confusion[c].iter().sum::<u64>() as f64;
        let col_sum: f64 = confusion.iter().map(|r| r[c]).sum::<u64>() as f64;
        let precision = if col_sum > 0.0 { tp / col_sum } else { 0.0 };
        let recall = if row_sum > 0.0 { tp / row_sum } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(f1);
    }
    let macro_avg = if classes > 0 {
        per_class.iter().sum::<f64>() / classes as f64
    } else {
        0.0
    };
    (macro_avg, per_class)
}

/// Trace over total. Empty matrix is an error.
pub fn accuracy(confusion: &[Vec<u64>]) -> Result<f64> {
    let total: u64 = confusion.iter().map(|r| r.iter().sum::<u64>()).sum();
    if total == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let trace: u64 = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    Ok(trace as f64 / total as f64)
}

/// Full metric bundle for one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Rows = gold, columns = predicted.
    pub confusion: Vec<Vec<u64>>,
    /// Gold count per class (confusion row sums).
    pub support: Vec<u64>,
}

pub fn report(gold: &[usize], pred: &[usize], classes: usize) -> Result<EvalReport> {
    let confusion = confusion_matrix(gold, pred, classes)?;
    let accuracy = accuracy(&confusion)?;
    let (macro_avg, per_class_f1) = macro_f1(&confusion);
    let support = confusion.iter().map(|r| r.iter().sum()).collect();
    Ok(EvalReport {
        accuracy,
        macro_f1: macro_avg,
        per_class_f1,
        confusion,
        support,
    })
}

/// Method-of-moments Erlang fit: `lambda = mean / variance` (population
/// variance, 1/n), integer shape `k = max(1, round(mean^2 / variance))`.
/// The unrounded Gamma shape is kept alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErlangFit {
    pub k: u64,
    pub lambda: f64,
    pub gamma_shape: f64,
    pub sample_mean: f64,
    pub sample_variance: f64,
    /// Sample median, midpoint rule for even counts.
    pub median: f64,
}

pub fn fit_erlang(samples: &[f64]) -> Result<ErlangFit> {
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples(samples.len()));
    }
    if samples.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(EvalError::NonPositiveSample);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / n;
    if variance == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let lambda = mean / variance;
    let gamma_shape = mean * mean / variance;
    let k = (gamma_shape.round() as u64).max(1);

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };

    Ok(ErlangFit {
        k,
        lambda,
        gamma_shape,
        sample_mean: mean,
        sample_variance: variance,
        median,
    })
}

/// Word-length counts: index 0..=30 directly, longer lengths pooled into
/// the `length > 30` overflow bucket.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LengthHistogram {
    pub counts: Vec<u64>,
    pub overflow: u64,
}

impl LengthHistogram {
    fn from_lengths(lengths: &[usize]) -> Self {
        let mut counts = vec![0u64; HISTOGRAM_MAX_LENGTH + 1];
        let mut overflow = 0;
        for &l in lengths {
            if l > HISTOGRAM_MAX_LENGTH {
                overflow += 1;
            } else {
                counts[l] += 1;
            }
        }
        LengthHistogram { counts, overflow }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }

    /// Label used for the pooled tail bucket in reports.
    pub fn overflow_label() -> &'static str {
        "length > 30"
    }
}

/// Erlang fits and length histograms for correct vs wrong predictions.
/// Partitions too small (or degenerate) to fit carry a notice instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthAnalysis {
    pub correct_fit: Option<ErlangFit>,
    pub wrong_fit: Option<ErlangFit>,
    pub all_fit: Option<ErlangFit>,
    pub notices: Vec<String>,
    pub correct_histogram: LengthHistogram,
    pub wrong_histogram: LengthHistogram,
}

pub fn length_analysis(
    predictions: &[usize],
    gold: &[usize],
    word_lengths: &[usize],
) -> Result<LengthAnalysis> {
    if predictions.len() != gold.len() || predictions.len() != word_lengths.len() {
        return Err(EvalError::UnalignedLists(predictions.len(), gold.len()));
    }
    let mut correct = Vec::new();
    let mut wrong = Vec::new();
    for ((&p, &g), &l) in predictions.iter().zip(gold).zip(word_lengths) {
        if p == g {
            correct.push(l);
        } else {
            wrong.push(l);
        }
    }
    let all: Vec<usize> = word_lengths.to_vec();

    let mut notices = Vec::new();
    let mut fit_partition = |name: &str, lengths: &[usize]| -> Option<ErlangFit> {
        let samples: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        match fit_erlang(&samples) {
            Ok(fit) => Some(fit),
            Err(e) => {
                notices.push(format!("{} partition fit omitted: {}", name, e));
                None
            }
        }
    };
    let correct_fit = fit_partition("correct", &correct);
    let wrong_fit = fit_partition("wrong", &wrong);
    let all_fit = fit_partition("all", &all);

    Ok(LengthAnalysis {
        correct_fit,
        wrong_fit,
        all_fit,
        notices,
        correct_histogram: LengthHistogram::from_lengths(&correct),
        wrong_histogram: LengthHistogram::from_lengths(&wrong),
    })
}

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

/// One scored example in a prediction file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: String,
    pub probs: Vec<f64>,
    pub pred: String,
}

/// A full prediction set: the ordered label names the probability vectors
/// index into, plus one record per example.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub labels: Vec<String>,
    pub records: Vec<PredictionRecord>,
}

#[derive(Serialize, Deserialize)]
struct PredictionHeader {
    format: String,
    labels: Vec<String>,
}

const PREDICTION_FORMAT: &str = "predictions.v1";

impl PredictionFile {
    /// JSON lines: a header object, then one record per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let header = PredictionHeader {
            format: PREDICTION_FORMAT.to_string(),
            labels: self.labels.clone(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let path_str = path.display().to_string();
        let mut lines = text.lines();
        let header_line = lines.next().ok_or_else(|| EvalError::BadPredictionFile {
            path: path_str.clone(),
            reason: "empty file".into(),
        })?;
        let header: PredictionHeader =
            serde_json::from_str(header_line).map_err(|e| EvalError::BadPredictionFile {
                path: path_str.clone(),
                reason: format!("bad header: {}", e),
            })?;
        if header.format != PREDICTION_FORMAT {
            return Err(EvalError::BadPredictionFile {
                path: path_str,
                reason: format!("unsupported format {:?}", header.format),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let rec: PredictionRecord =
                serde_json::from_str(line).map_err(|e| EvalError::BadPredictionFile {
                    path: path_str.clone(),
                    reason: format!("record {}: {}", i + 1, e),
                })?;
            if rec.probs.len() != header.labels.len() {
                return Err(EvalError::BadPredictionFile {
                    path: path_str.clone(),
                    reason: format!(
                        "record {}: {} probabilities for {} labels",
                        i + 1,
                        rec.probs.len(),
                        header.labels.len()
                    ),
                });
            }
            records.push(rec);
        }
        Ok(PredictionFile {
            labels: header.labels,
            records,
        })
    }

    /// Metrics of this prediction set against its own gold column.
    pub fn report(&self) -> Result<EvalReport> {
        let id_of = |name: &str| -> Result<usize> {
            self.labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| EvalError::InvalidDistribution(format!("unknown label {:?}", name)))
        };
        let mut gold = Vec::with_capacity(self.records.len());
        let mut pred = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            gold.push(id_of(&rec.gold)?);
            pred.push(id_of(&rec.pred)?);
        }
        report(&gold, &pred, self.labels.len())
    }
}

/// Combine several aligned prediction sets record-by-record with [`ensemble`].
/// Files must share the label set and the exact id sequence; gold labels must
/// agree.
pub fn ensemble_files(files: &[PredictionFile]) -> Result<PredictionFile> {
    let first = files
        .first()
        .ok_or_else(|| EvalError::InvalidDistribution("no prediction files".into()))?;
    for f in files {
        if f.labels != first.labels {
            return Err(EvalError::LabelSetMismatch(
                first.labels.clone(),
                f.labels.clone(),
            ));
        }
        if f.records.len() != first.records.len() {
            return Err(EvalError::UnalignedLists(
                first.records.len(),
                f.records.len(),
            ));
        }
    }
    let mut records = Vec::with_capacity(first.records.len());
    for i in 0..first.records.len() {
        for f in files {
            if f.records[i].id != first.records[i].id {
                return Err(EvalError::IdMisalignment {
                    index: i,
                    a: first.records[i].id.clone(),
                    b: f.records[i].id.clone(),
                });
            }
            if f.records[i].gold != first.records[i].gold {
                return Err(EvalError::IdMisalignment {
                    index: i,
                    a: format!("{} (gold {})", first.records[i].id, first.records[i].gold),
                    b: format!("{} (gold {})", f.records[i].id, f.records[i].gold),
                });
            }
        }
        let dists: Vec<ProbDist> = files
            .iter()
            .map(|f| ProbDist::new(f.records[i].probs.clone()))
            .collect::<Result<_>>()?;
        let combined = ensemble(&dists)?;
        let pred_id = combined.argmax();
        records.push(PredictionRecord {
            id: first.records[i].id.clone(),
            gold: first.records[i].gold.clone(),
            probs: combined.probs().to_vec(),
            pred: first.labels[pred_id].clone(),
        });
    }
    Ok(PredictionFile {
        labels: first.labels.clone(),
        records,
    })
}
