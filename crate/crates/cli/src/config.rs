//! Run configuration: a TOML file plus CLI overrides, resolved into concrete
//! model/training configs and echoed back into the run directory so any
//! result can be replayed.
//!
//! Precedence, lowest to highest: built-in defaults, preset, config file,
//! CLI flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dialectid::encoder::{ModelConfig, TrainMode};
use dialectid::training::TrainConfig;

/// Named preset capturing the per-dataset maximum sequence length
/// (90 for dialectal runs, 110 for standard-register runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Da,
    Msa,
}

impl Preset {
    pub fn max_len(self) -> usize {
        match self {
            Preset::Da => 90,
            Preset::Msa => 110,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "da" => Ok(Preset::Da),
            "msa" => Ok(Preset::Msa),
            other => bail!("unknown preset {:?} (expected da or msa)", other),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub has_header: Option<bool>,
    pub max_len: Option<usize>,
}

/// Architecture knobs. Defaults shape a 12-layer, 768-wide encoder; fixture
/// runs override these with desk-scale values.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_positions: Option<usize>,
    pub adapter_enabled: Option<bool>,
    pub adapter_bottleneck: Option<usize>,
    pub vatt_enabled: Option<bool>,
    pub dropout_hidden: Option<f64>,
    pub dropout_cls: Option<f64>,
    pub mode: Option<TrainMode>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub eval_every: Option<usize>,
    pub patience: Option<usize>,
    pub warmup_steps: Option<u64>,
    pub lr_head: Option<f64>,
    pub lr_rest: Option<f64>,
    pub lr_floor_ratio: Option<f64>,
    pub decay_quantum: Option<u64>,
    pub schedule: Option<dialectid::training::Schedule>,
    pub weight_decay: Option<f64>,
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// CLI flag overrides (highest precedence).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a training run needs, fully concrete. Serialized into the run
/// directory as the resolved config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedRunConfig {
    pub preset: Option<Preset>,
    pub train_tsv: PathBuf,
    pub dev_tsv: PathBuf,
    pub vocab_file: PathBuf,
    pub has_header: bool,
    pub max_len: usize,
    pub out_dir: PathBuf,
    /// vocab_size and num_classes are data-derived at run start.
    pub model: ModelTemplate,
    pub training: TrainConfig,
}

/// ModelConfig minus the two data-derived fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub adapter_enabled: bool,
    pub adapter_bottleneck: usize,
    pub vatt_enabled: bool,
    pub dropout_hidden: f64,
    pub dropout_cls: f64,
    pub mode: TrainMode,
}

impl ModelTemplate {
    pub fn into_model_config(self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_positions: self.max_positions,
            num_classes,
            adapter_enabled: self.adapter_enabled,
            adapter_bottleneck: self.adapter_bottleneck,
            vatt_enabled: self.vatt_enabled,
            dropout_hidden: self.dropout_hidden,
            dropout_cls: self.dropout_cls,
            mode: self.mode,
        }
    }
}

pub fn load_config_file(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("cannot parse config file {}", path.display()))
}

/// Merge defaults, preset, file, and flags; collect every validation
/// problem before failing.
pub fn resolve(file: RunConfigFile, overrides: Overrides) -> Result<ResolvedRunConfig> {
    let defaults = TrainConfig::default();
    let preset = overrides.preset.or(file.preset);
    let max_len = file
        .data
        .max_len
        .or(preset.map(Preset::max_len))
        .unwrap_or_else(|| Preset::Da.max_len());

    let model = ModelTemplate {
        num_layers: file.model.num_layers.unwrap_or(12),
        hidden: file.model.hidden.unwrap_or(768),
        heads: file.model.heads.unwrap_or(12),
        ffn_dim: file.model.ffn_dim.unwrap_or(3072),
        max_positions: file.model.max_positions.unwrap_or(max_len),
        adapter_enabled: file.model.adapter_enabled.unwrap_or(false),
        adapter_bottleneck: file.model.adapter_bottleneck.unwrap_or(64),
        vatt_enabled: file.model.vatt_enabled.unwrap_or(false),
        dropout_hidden: file.model.dropout_hidden.unwrap_or(0.1),
        dropout_cls: file.model.dropout_cls.unwrap_or(0.3),
        mode: file.model.mode.unwrap_or(TrainMode::FineTune),
    };

    let training = TrainConfig {
        batch_size: file.training.batch_size.unwrap_or(defaults.batch_size),
        eval_every: file.training.eval_every.unwrap_or(defaults.eval_every),
        patience: file.training.patience.unwrap_or(defaults.patience),
        warmup_steps: file.training.warmup_steps.unwrap_or(defaults.warmup_steps),
        lr_head: file.training.lr_head.unwrap_or(defaults.lr_head),
        lr_rest: file.training.lr_rest.unwrap_or(defaults.lr_rest),
        lr_floor_ratio: file
            .training
            .lr_floor_ratio
            .unwrap_or(defaults.lr_floor_ratio),
        decay_quantum: file.training.decay_quantum.unwrap_or(defaults.decay_quantum),
        schedule: file.training.schedule.unwrap_or(defaults.schedule),
        weight_decay: file.training.weight_decay.unwrap_or(defaults.weight_decay),
        max_steps: overrides.max_steps.or(file.training.max_steps),
        seed: overrides.seed.or(file.seed).unwrap_or(0),
    };

    let mut problems: Vec<String> = Vec::new();
    let train_tsv = file.data.train.clone();
    let dev_tsv = file.data.dev.clone();
    let vocab_file = file.data.vocab.clone();
    for (name, path) in [
        ("data.train", &train_tsv),
        ("data.dev", &dev_tsv),
        ("data.vocab", &vocab_file),
    ] {
        match path {
            None => problems.push(format!("{} is required", name)),
            Some(p) if !p.exists() => {
                problems.push(format!("{} = {} does not exist", name, p.display()))
            }
            Some(_) => {}
        }
    }
    let out_dir = overrides.out_dir.or(file.output.dir.clone());
    if out_dir.is_none() {
        problems.push("output.dir (or --out-dir) is required".into());
    }
    if max_len < 3 {
        problems.push(format!("data.max_len = {} must be at least 3", max_len));
    }
    if model.max_positions < max_len {
        problems.push(format!(
            "model.max_positions = {} is smaller than max_len = {}",
            model.max_positions, max_len
        ));
    }
    // Structural model checks run against a placeholder vocab/classes; the
    // data-derived fields are validated again at run start.
    if let Err(e) = model.clone().into_model_config(4, 2).validate() {
        problems.push(e.to_string());
    }
    if let Err(e) = training.validate() {
        problems.push(e.to_string());
    }
    if !problems.is_empty() {
        bail!("invalid run config:\n  - {}", problems.join("\n  - "));
    }

    Ok(ResolvedRunConfig {
        preset,
        train_tsv: train_tsv.unwrap(),
        dev_tsv: dev_tsv.unwrap(),
        vocab_file: vocab_file.unwrap(),
        has_header: file.data.has_header.unwrap_or(false),
        max_len,
        out_dir: out_dir.unwrap(),
        model,
        training,
    })
}

impl ResolvedRunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("resolved config serializes")
    }
}
