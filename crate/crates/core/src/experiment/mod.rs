//! Declarative experiments: one TOML file names the corpora, the encoder
//! and training settings, the seeds and the scoring rules; the runners here
//! execute the whole pipeline per seed and collect [`EvalReport`]s.
//!
//! ```toml
//! name = "synthetic-desk"
//! seeds = [0, 1, 2]
//! max_seq_len = 25
//! rules = ["msp", "energy", "maha"]
//! tuned_baselines = ["odin", "react", "dice"]
//! sweep_offsets = [0, 2, 4, 8]
//!
//! [corpus]
//! kind = "synthetic"        # or kind = "files", id = "id.jsonl", ood = "ood.jsonl"
//! num_classes = 4
//!
//! [encoder]
//! model_dim = 64
//!
//! [classifier]              # TrainConfig for the CE classifier
//! epochs = 10
//!
//! [rejection_train]         # TrainConfig for the rejection network
//! epochs = 5
//! learning_rate = 1e-4
//!
//! [rejection]
//! objective = "ce_mcl"
//! b_o = 4
//! ```
//!
//! Every section is optional and falls back to its defaults.

mod runner;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use runner::{
    ablate, run_experiment, sweep_markdown, sweep_tstar, sweep_tsv, AblationResult, ExperimentResult, RejectionResult, SandwichRow,
    SeedRun, SweepRow, Variant,
};

use crate::artifact::sha256_bytes;
use crate::data::{build_vocab, load_corpus, Corpus, CorpusFormat, SyntheticConfig, Vocabulary};
use crate::encoder::{EncoderConfig, HeadPooling, TrainConfig};
use crate::gaussian::DEFAULT_SHRINKAGE;
use crate::poe::ConstructOptions;
use crate::rejection::RejectionConfig;
use crate::scoring::{BaseRule, BaselineGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic(SyntheticConfig),
    /// ID corpus with train/dev/test splits and an OOD file whose test
    /// split (or, failing that, every row) is the OOD test set. Relative
    /// paths are resolved against the config file's directory.
    Files {
        id: PathBuf,
        ood: PathBuf,
        #[serde(default)]
        format: Option<CorpusFormat>,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SyntheticConfig::default())
    }
}

/// Encoder shape; vocabulary size, class count, sequence length and seed
/// come from the data and the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention_pooling: HeadPooling,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let c = EncoderConfig::small(8, 2, 8);
        EncoderSettings {
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            model_dim: c.model_dim,
            ffn_dim: c.ffn_dim,
            dropout: c.dropout,
            attention_pooling: c.attention_pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSource,
    /// Including `[CLS]`.
    pub max_seq_len: usize,
    pub min_freq: usize,
    pub encoder: EncoderSettings,
    pub classifier: TrainConfig,
    pub rejection_train: TrainConfig,
    pub rejection: RejectionConfig,
    pub strategy: String,
    pub construct: ConstructOptions,
    pub shrinkage: f64,
    /// Parameter-free rules applied to both networks.
    pub rules: Vec<String>,
    /// Grid-searched baselines on the CE classifier.
    pub tuned_baselines: Vec<String>,
    pub base_rule: BaseRule,
    pub grid: BaselineGrid,
    pub sweep_offsets: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seeds: vec![0],
            corpus: CorpusSource::default(),
            max_seq_len: 25,
            min_freq: 1,
            encoder: EncoderSettings::default(),
            classifier: TrainConfig::desk(),
            rejection_train: TrainConfig { epochs: 5, learning_rate: 1e-4, ..TrainConfig::desk() },
            rejection: RejectionConfig::default(),
            strategy: "attention".into(),
            construct: ConstructOptions::default(),
            shrinkage: DEFAULT_SHRINKAGE,
            rules: vec!["msp".into(), "energy".into(), "maha".into()],
            tuned_baselines: vec!["odin".into(), "react".into(), "dice".into()],
            base_rule: BaseRule::Msp,
            grid: BaselineGrid::default(),
            sweep_offsets: vec![0, 2, 4, 8],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative corpus paths become relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let CorpusSource::Files { id, ood, .. } = &mut cfg.corpus {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [id, ood] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        self.classifier.validate()?;
        self.rejection_train.validate()?;
        for r in &self.tuned_baselines {
            if !matches!(r.as_str(), "odin" | "react" | "dice") {
                return Err(Error::Unknown { kind: "tuned baseline", name: r.clone() });
            }
        }
        Ok(())
    }

    /// Stable hash of the effective configuration.
    pub fn hash(&self) -> String {
        sha256_bytes(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn encoder_config(&self, vocab_size: usize, num_classes: usize, seed: u64) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            vocab_size,
            num_layers: e.num_layers,
            num_heads: e.num_heads,
            model_dim: e.model_dim,
            ffn_dim: e.ffn_dim,
            max_seq_len: self.max_seq_len,
            num_classes,
            dropout: e.dropout,
            seed,
            attention_pooling: e.attention_pooling,
        }
    }

    pub fn classifier_train(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.classifier.clone() }
    }

    pub fn rejection_train(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.rejection_train.clone() }
    }
}

/// Tokenized ID and OOD data with the vocabulary built on the ID train
/// split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub ood: Corpus,
    pub id_name: String,
    pub ood_name: String,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (id, ood) = match &cfg.corpus {
        CorpusSource::Synthetic(s) => s.generate()?,
        CorpusSource::Files { id, ood, format } => {
            let fmt = |p: &Path| {
                format
                    .or_else(|| CorpusFormat::from_path(p))
                    .ok_or_else(|| Error::Config(format!("cannot infer the format of {}; set corpus.format", p.display())))
            };
            let id_c = load_corpus(id, fmt(id)?)?;
            let mut ood_c = load_corpus(ood, fmt(ood)?)?;
            if ood_c.test.is_empty() {
                ood_c.test = ood_c.train.drain(..).chain(ood_c.dev.drain(..)).collect();
            }
            (id_c, ood_c)
        }
    };
    if id.train.is_empty() || id.test.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} needs train and test splits", id.provenance)));
    }
    if ood.test.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} has no OOD examples", ood.provenance)));
    }
    let train_texts: Vec<&str> = id.train.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&train_texts, cfg.min_freq)?;
    let corpus = id.tokenize(&vocab, cfg.max_seq_len);
    let mut ood_tok = ood.tokenize(&vocab, cfg.max_seq_len);
    ood_tok.num_classes = corpus.num_classes;
    for ex in &mut ood_tok.test {
        ex.label = 0;
    }
    Ok(PreparedData { vocab, corpus, ood: ood_tok, id_name: id.provenance, ood_name: ood.provenance })
}

#[cfg(test)]
mod tests;
