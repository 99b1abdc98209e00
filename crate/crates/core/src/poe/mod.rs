//! Surrogate OOD construction: rank a training example's tokens, mask them
//! one at a time in that order, and stop at the first step whose feature
//! lies farther from every class mean than the farthest training sample of
//! the example's class.

mod strategy;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use strategy::{AttentionRanker, LeaveOneOutRanker, MaskStrategy, RandomRanker, RankerFactory, StrategyRegistry, TokenRanker};

use crate::data::{TokenId, TokenizedExample, Vocabulary, MASK, NUM_SPECIAL, PAD};
use crate::encoder::{features, EncoderParams};
use crate::gaussian::GaussianStats;
use crate::{Error, Result};

/// Which class threshold a surrogate has to exceed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// The source example's gold class.
    #[default]
    GoldClass,
    /// The largest threshold over all classes.
    GlobalMax,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructOptions {
    pub threshold_mode: ThresholdMode,
    /// Added to every class threshold before the stopping test.
    pub threshold_delta: f64,
    /// Extra tokens masked past the stopping step (capped at S).
    pub stop_offset: usize,
}

impl ConstructOptions {
    pub fn threshold(&self, stats: &GaussianStats, class: usize) -> f64 {
        let base = match self.threshold_mode {
            ThresholdMode::GoldClass => stats.class_thresholds[class],
            ThresholdMode::GlobalMax => stats.max_threshold(),
        };
        base + self.threshold_delta
    }
}

/// A masked copy of a training example, labelled as the extra OOD class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateExample {
    pub source_index: usize,
    /// Tokens with `t_star` maskable slots set to `[MASK]`; `label` is K
    /// (the 0-based index of class K+1).
    pub tokens: TokenizedExample,
    /// Number of masked tokens.
    pub t_star: usize,
    /// Masking step at which the stopping rule fired (S when it never did).
    pub stop_step: usize,
    pub exceeded: bool,
    /// Masked positions in masking order; its length is `t_star`.
    pub masked_order: Vec<usize>,
    /// Closest-class squared Mahalanobis distance of the returned tokens.
    pub distance: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub source_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Construction {
    Built(SurrogateExample),
    Skipped(SkipRecord),
}

/// Builds one surrogate. `example.label` must be an ID class.
pub fn construct_surrogate(
    example: &TokenizedExample,
    source_index: usize,
    params: &EncoderParams,
    stats: &GaussianStats,
    ranker: &dyn TokenRanker,
    opts: &ConstructOptions,
) -> Result<Construction> {
    let k = params.config.num_classes;
    if example.label >= k || stats.num_classes() != k {
        return Err(Error::Label { label: example.label, max: k - 1 });
    }
    let s = example.len;
    if s == 0 {
        return Ok(Construction::Skipped(SkipRecord { source_index, reason: "no maskable tokens".into() }));
    }
    let output = params.forward_one(example)?;
    let order = ranker.rank(example, &output, params)?;
    let threshold = opts.threshold(stats, example.label);

    let mut stop = None;
    let mut last_distance = f64::NAN;
    for t in 1..=s {
        let masked = example.with_masked(&order[..t]);
        let dist = stats.distance(&params.forward_one(&masked)?.cls_feature)?;
        last_distance = dist;
        if dist > threshold {
            stop = Some(t);
            break;
        }
    }
    let (stop_step, exceeded) = match stop {
        Some(t) => (t, true),
        None => (s, false),
    };
    let t_star = (stop_step + opts.stop_offset).min(s);
    let mut tokens = example.with_masked(&order[..t_star]);
    let distance = if t_star == stop_step { last_distance } else { stats.distance(&params.forward_one(&tokens)?.cls_feature)? };
    tokens.label = k;
    Ok(Construction::Built(SurrogateExample {
        source_index,
        tokens,
        t_star,
        stop_step,
        exceeded,
        masked_order: order[..t_star].to_vec(),
        distance,
        threshold,
    }))
}

/// Surrogate-versus-train score comparison plus stopping statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub strategy: String,
    pub num_built: usize,
    pub num_skipped: usize,
    pub fraction_exceeded: f64,
    pub t_star_histogram: BTreeMap<usize, usize>,
    pub mean_t_star: f64,
    /// Mean Mahalanobis score `M` (higher = more ID-like) of the surrogates.
    pub mean_score_surrogate: f64,
    /// Mean `M` of the training features the stats were fitted on.
    pub mean_score_train: f64,
    /// Whether surrogates sit farther from the ID classes than training
    /// data on average; false signals too few exceeded surrogates.
    pub surrogates_farther: bool,
}

#[derive(Debug, Clone)]
pub struct SurrogateSet {
    pub surrogates: Vec<SurrogateExample>,
    pub skipped: Vec<SkipRecord>,
    pub summary: SurrogateSummary,
}

/// One surrogate per training example with at least one token. Examples are
/// processed in parallel; the output keeps training order.
pub fn construct_surrogate_set(
    train: &[TokenizedExample],
    params: &EncoderParams,
    stats: &GaussianStats,
    ranker: &dyn TokenRanker,
    opts: &ConstructOptions,
) -> Result<SurrogateSet> {
    let results: Vec<Result<Construction>> =
        train.par_iter().enumerate().map(|(i, ex)| construct_surrogate(ex, i, params, stats, ranker, opts)).collect();
    let mut surrogates = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r? {
            Construction::Built(s) => surrogates.push(s),
            Construction::Skipped(s) => {
                log::warn!("skipping train example {}: {}", s.source_index, s.reason);
                skipped.push(s)
            }
        }
    }
    let train_scores: Vec<f64> = features(params, train)?.iter().map(|f| stats.score(f)).collect::<Result<_>>()?;
    let summary = summarize(ranker.name(), &surrogates, skipped.len(), &train_scores);
    Ok(SurrogateSet { surrogates, skipped, summary })
}

pub fn summarize(strategy: &str, surrogates: &[SurrogateExample], num_skipped: usize, train_scores: &[f64]) -> SurrogateSummary {
    let n = surrogates.len();
    let mut hist = BTreeMap::new();
    for s in surrogates {
        *hist.entry(s.t_star).or_insert(0) += 1;
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { f64::NAN } else { xs.sum::<f64>() / n as f64 };
    let mean_score_surrogate = mean(&mut surrogates.iter().map(|s| -s.distance), n);
    let mean_score_train = mean(&mut train_scores.iter().copied(), train_scores.len());
    SurrogateSummary {
        strategy: strategy.to_string(),
        num_built: n,
        num_skipped,
        fraction_exceeded: mean(&mut surrogates.iter().map(|s| s.exceeded as u8 as f64), n),
        t_star_histogram: hist,
        mean_t_star: mean(&mut surrogates.iter().map(|s| s.t_star as f64), n),
        mean_score_surrogate,
        mean_score_train,
        surrogates_farther: mean_score_surrogate < mean_score_train,
    }
}

/// Replaces every `[MASK]` in a maskable slot with a uniformly drawn regular
/// token id below `vocab_size`; all other positions are copied.
pub fn replace_masks<R: Rng + ?Sized>(tokens: &TokenizedExample, vocab_size: usize, rng: &mut R) -> Result<TokenizedExample> {
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::Invalid("vocabulary has no regular tokens to sample".into()));
    }
    let mut out = tokens.clone();
    for (id, &m) in out.ids.iter_mut().zip(&tokens.maskable) {
        if m && *id == MASK {
            *id = rng.gen_range(NUM_SPECIAL..vocab_size) as TokenId;
        }
    }
    Ok(out)
}

pub fn replace_masks_randomly<R: Rng + ?Sized>(surrogate: &SurrogateExample, vocab: &Vocabulary, rng: &mut R) -> Result<TokenizedExample> {
    replace_masks(&surrogate.tokens, vocab.size(), rng)
}

#[derive(Serialize, Deserialize)]
struct SurrogateLine {
    source_index: usize,
    t_star: usize,
    exceeded: bool,
    ids: Vec<TokenId>,
    stop_step: usize,
    masked_order: Vec<usize>,
    distance: f64,
    threshold: f64,
    label: usize,
}

/// One JSON object per line: `source_index, t_star, exceeded, ids` plus the
/// stopping metadata.
pub fn write_surrogates_jsonl(path: &Path, surrogates: &[SurrogateExample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for s in surrogates {
        let line = SurrogateLine {
            source_index: s.source_index,
            t_star: s.t_star,
            exceeded: s.exceeded,
            ids: s.tokens.ids.clone(),
            stop_step: s.stop_step,
            masked_order: s.masked_order.clone(),
            distance: s.distance,
            threshold: s.threshold,
            label: s.tokens.label,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_surrogates_jsonl(path: &Path) -> Result<Vec<SurrogateExample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SurrogateLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        let len = l.ids.iter().skip(1).take_while(|&&id| id != PAD).count();
        let maskable = (0..l.ids.len()).map(|p| p >= 1 && p <= len).collect();
        out.push(SurrogateExample {
            source_index: l.source_index,
            tokens: TokenizedExample { ids: l.ids, label: l.label, maskable, len },
            t_star: l.t_star,
            stop_step: l.stop_step,
            exceeded: l.exceeded,
            masked_order: l.masked_order,
            distance: l.distance,
            threshold: l.threshold,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
