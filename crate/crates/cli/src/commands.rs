//! Implementations of the six subcommands.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dialectid::corpus::{self, EncodedExample, LabelSet, RawExample};
use dialectid::encoder::init_model;
use dialectid::eval::{self, EvalReport, LengthAnalysis, LengthHistogram, PredictionFile, PredictionRecord};
use dialectid::training::{self, load_checkpoint, save_checkpoint};

use crate::config::{self, Overrides, ResolvedRunConfig};

pub fn build_vocab(corpus_path: &Path, size: usize, out: &Path, has_header: bool) -> Result<()> {
    let examples = corpus::load_tsv(corpus_path, has_header)?;
    let vocab = corpus::build_vocab(&examples, size)?;
    vocab.save(out)?;
    println!(
        "wrote vocabulary with {} tokens to {}",
        vocab.len(),
        out.display()
    );
    Ok(())
}

fn encode_all(
    examples: &[RawExample],
    vocab: &corpus::Vocab,
    labels: &LabelSet,
    max_len: usize,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| corpus::encode(e, vocab, labels, max_len).map_err(Into::into))
        .collect()
}

pub fn train(config_path: &Path, overrides: Overrides) -> Result<()> {
    let file = config::load_config_file(config_path)?;
    let resolved = config::resolve(file, overrides)?;
    run_training(&resolved)
}

fn run_training(cfg: &ResolvedRunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;

    let vocab = corpus::Vocab::load(&cfg.vocab_file)?;
    let train_raw = corpus::load_tsv(&cfg.train_tsv, cfg.has_header)?;
    let dev_raw = corpus::load_tsv(&cfg.dev_tsv, cfg.has_header)?;
    let labels = corpus::build_label_set(&train_raw);
    let train_set = encode_all(&train_raw, &vocab, &labels, cfg.max_len)?;
    let dev_set = encode_all(&dev_raw, &vocab, &labels, cfg.max_len)?;

    let model_config = cfg
        .model
        .clone()
        .into_model_config(vocab.len(), labels.len());
    model_config.validate()?;
    let model = init_model::<f32>(&model_config, cfg.training.seed)?;

    // Echo the fully resolved configuration before the run starts.
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;

    let outcome = training::train(model, &train_set, &dev_set, &cfg.training)?;

    save_checkpoint(
        &outcome.model,
        &labels,
        cfg.out_dir.join("checkpoint.ckpt"),
    )?;
    fs::write(cfg.out_dir.join("train_log.jsonl"), outcome.log.to_jsonl())?;
    fs::write(
        cfg.out_dir.join("dev_report.json"),
        serde_json::to_string_pretty(&outcome.best_report)?,
    )?;

    println!(
        "best dev accuracy {:.4}, macro-F1 {:.4} after {} evaluations",
        outcome.best_report.accuracy,
        outcome.best_report.macro_f1,
        outcome.log.records.len()
    );
    println!("run artifacts in {}", cfg.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct DiagnosticsRecord<'a> {
    id: &'a str,
    /// Vertical-attention weights over the layer stack, absent when the
    /// model pools with the last CLS vector only.
    alpha: Option<&'a [f64]>,
}

/// Score a dataset with a checkpoint. The vocabulary is not embedded in the
/// checkpoint container, so the run's vocab file comes along; a size check
/// catches the wrong-family case.
pub fn predict(
    checkpoint: &Path,
    vocab_path: &Path,
    input: &Path,
    out: &Path,
    has_header: bool,
    max_len: Option<usize>,
    diagnostics: Option<&Path>,
) -> Result<()> {
    let (model, labels) = load_checkpoint(checkpoint)?;
    let vocab = corpus::Vocab::load(vocab_path)?;
    if vocab.len() != model.config.vocab_size {
        bail!(
            "vocabulary {} has {} tokens but the checkpoint was trained with {}",
            vocab_path.display(),
            vocab.len(),
            model.config.vocab_size
        );
    }
    let examples = corpus::load_tsv(input, has_header)?;
    for ex in &examples {
        if labels.id_of(&ex.label).is_none() {
            bail!(
                "label set mismatch: dataset label {:?} (example {}) is not in the checkpoint labels {:?}",
                ex.label,
                ex.id,
                labels.names()
            );
        }
    }
    let max_len = max_len.unwrap_or(model.config.max_positions);
    let encoded = encode_all(&examples, &vocab, &labels, max_len)?;
    let scored = training::predict_probs(&model, &encoded)?;

    let records: Vec<PredictionRecord> = examples
        .iter()
        .zip(&scored)
        .map(|(ex, (dist, _))| PredictionRecord {
            id: ex.id.clone(),
            gold: ex.label.clone(),
            probs: dist.probs().to_vec(),
            pred: labels.names()[dist.argmax()].clone(),
        })
        .collect();
    let file = PredictionFile {
        labels: labels.names().to_vec(),
        records,
    };
    file.save(out)?;

    if let Some(diag_path) = diagnostics {
        let mut text = String::new();
        for (ex, (_, alpha)) in examples.iter().zip(&scored) {
            let record = DiagnosticsRecord {
                id: &ex.id,
                alpha: alpha.as_deref(),
            };
            text.push_str(&serde_json::to_string(&record)?);
            text.push('\n');
        }
        fs::write(diag_path, text)?;
    }

    println!("wrote {} predictions to {}", file.records.len(), out.display());
    Ok(())
}

pub fn ensemble(files: &[std::path::PathBuf], out: &Path, report_path: Option<&Path>) -> Result<()> {
    if files.len() < 2 {
        bail!("ensemble needs at least 2 prediction files, got {}", files.len());
    }
    let loaded: Vec<PredictionFile> = files
        .iter()
        .map(PredictionFile::load)
        .collect::<eval::Result<_>>()?;
    let combined = eval::ensemble_files(&loaded)?;
    combined.save(out)?;
    let report = combined.report()?;
    if let Some(path) = report_path {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    println!(
        "ensemble of {} members: accuracy {:.4}, macro-F1 {:.4}",
        loaded.len(),
        report.accuracy,
        report.macro_f1
    );
    Ok(())
}

/// Full analysis bundle: metrics plus the length study.
#[derive(Serialize)]
struct AnalysisReport {
    metrics: EvalReport,
    length: LengthAnalysis,
    histogram_overflow_label: &'static str,
}

pub fn analyze(predictions: &Path, corpus_path: &Path, out: &Path, has_header: bool) -> Result<()> {
    let preds = PredictionFile::load(predictions)?;
    let examples = corpus::load_tsv(corpus_path, has_header)?;
    let lengths_by_id: HashMap<&str, usize> = examples
        .iter()
        .map(|e| (e.id.as_str(), corpus::word_length(&e.text)))
        .collect();

    let id_of = |name: &str| -> Result<usize> {
        preds
            .labels
            .iter()
            .position(|l| l == name)
            .with_context(|| format!("label {:?} not in prediction file labels", name))
    };
    let mut gold = Vec::with_capacity(preds.records.len());
    let mut pred = Vec::with_capacity(preds.records.len());
    let mut lengths = Vec::with_capacity(preds.records.len());
    for rec in &preds.records {
        let length = *lengths_by_id.get(rec.id.as_str()).with_context(|| {
            format!(
                "prediction id {:?} not found in corpus {}",
                rec.id,
                corpus_path.display()
            )
        })?;
        gold.push(id_of(&rec.gold)?);
        pred.push(id_of(&rec.pred)?);
        lengths.push(length);
    }

    let metrics = eval::report(&gold, &pred, preds.labels.len())?;
    let length = eval::length_analysis(&pred, &gold, &lengths)?;
    let report = AnalysisReport {
        metrics,
        length,
        histogram_overflow_label: LengthHistogram::overflow_label(),
    };
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "analysis of {} predictions written to {}",
        preds.records.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    counts: Vec<ClassCount>,
    most_frequent: String,
    least_frequent: String,
    total: usize,
}

#[derive(Serialize)]
struct ClassCount {
    label: String,
    count: usize,
}

pub fn stats(corpus_path: &Path, has_header: bool) -> Result<()> {
    let examples = corpus::load_tsv(corpus_path, has_header)?;
    let labels = corpus::build_label_set(&examples);
    let stats = corpus::corpus_stats(&examples, &labels)?;
    let report = StatsReport {
        counts: labels
            .names()
            .iter()
            .zip(&stats.counts)
            .map(|(label, &count)| ClassCount {
                label: label.clone(),
                count,
            })
            .collect(),
        most_frequent: labels.names()[stats.most_frequent].clone(),
        least_frequent: labels.names()[stats.least_frequent].clone(),
        total: examples.len(),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
