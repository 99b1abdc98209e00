use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{msp_score, softmax, BaseRule, RuleSpec, ScoringContext, ScoringInputs, ScoringRule};
use crate::data::TokenizedExample;
use crate::encoder::{backward, forward_cached, EncoderParams};
use crate::{Error, Result};

pub struct MspRule;

impl ScoringRule for MspRule {
    fn spec(&self) -> RuleSpec {
        RuleSpec::named("msp")
    }

    fn score(&self, _ctx: &ScoringContext, inputs: &ScoringInputs) -> Result<Vec<f64>> {
        inputs.outputs.iter().map(|o| msp_score(&o.logits)).collect()
    }
}

pub struct EnergyRule;

impl ScoringRule for EnergyRule {
    fn spec(&self) -> RuleSpec {
        RuleSpec::named("energy")
    }

    fn score(&self, _ctx: &ScoringContext, inputs: &ScoringInputs) -> Result<Vec<f64>> {
        inputs.outputs.iter().map(|o| super::energy_score(&o.logits)).collect()
    }
}

pub struct MahaRule;

impl ScoringRule for MahaRule {
    fn spec(&self) -> RuleSpec {
        RuleSpec::named("maha")
    }

    fn score(&self, ctx: &ScoringContext, inputs: &ScoringInputs) -> Result<Vec<f64>> {
        let stats = ctx.require_stats()?;
        inputs.outputs.iter().map(|o| super::maha_rule_score(stats, &o.cls_feature)).collect()
    }
}

/// ODIN adapted to discrete text: the perturbation is applied to the
/// embedding-layer output (token + position embeddings) rather than to the
/// input tokens. The step is `epsilon * sign(grad)` of the log of the
/// temperature-scaled softmax of the predicted class, i.e. it ascends the
/// scaled confidence.
pub fn odin_score(params: &EncoderParams, example: &TokenizedExample, temperature: f64, epsilon: f64) -> Result<f64> {
    if !(temperature > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::Config(format!("odin needs T > 0 and eps >= 0, got T={temperature} eps={epsilon}")));
    }
    params.check_example(example)?;
    let layout = params.layout();
    let cache = forward_cached(params, &layout, example, None, None);
    let scaled = |z: &[f64]| -> Vec<f64> { z.iter().map(|v| v / temperature).collect() };
    if epsilon == 0.0 {
        return msp_score(&scaled(&cache.logits));
    }
    let p = softmax(&scaled(&cache.logits));
    let pred = super::argmax(&p);
    let dlogits: Vec<f64> = p.iter().enumerate().map(|(c, &pc)| (if c == pred { 1.0 } else { 0.0 } - pc) / temperature).collect();
    let mut scratch = vec![0.0; layout.total];
    let zero = vec![0.0; params.config.model_dim];
    let grad = backward(params, &layout, example, &cache, &zero, &dlogits, &mut scratch);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("odin input gradient".into()));
    }
    let delta: Vec<f64> = grad
        .iter()
        .map(|&g| {
            if g > 0.0 {
                epsilon
            } else if g < 0.0 {
                -epsilon
            } else {
                0.0
            }
        })
        .collect();
    let perturbed = forward_cached(params, &layout, example, Some(&delta), None);
    msp_score(&scaled(&perturbed.logits))
}

pub struct OdinRule {
    pub temperature: f64,
    pub epsilon: f64,
}

impl OdinRule {
    pub fn from_spec(spec: &RuleSpec) -> Result<Self> {
        let rule = OdinRule { temperature: spec.temperature.unwrap_or(1.0), epsilon: spec.epsilon.unwrap_or(0.0) };
        if !(rule.temperature > 0.0) || !(rule.epsilon >= 0.0) {
            return Err(Error::Config(format!("invalid odin hyperparameters {}", spec.label())));
        }
        Ok(rule)
    }
}

impl ScoringRule for OdinRule {
    fn spec(&self) -> RuleSpec {
        RuleSpec::odin(self.temperature, self.epsilon)
    }

    fn score(&self, ctx: &ScoringContext, inputs: &ScoringInputs) -> Result<Vec<f64>> {
        if self.epsilon == 0.0 {
            let t = self.temperature;
            return inputs.outputs.iter().map(|o| msp_score(&o.logits.iter().map(|v| v / t).collect::<Vec<_>>())).collect();
        }
        inputs.examples.par_iter().map(|ex| odin_score(ctx.params, ex, self.temperature, self.epsilon)).collect()
    }
}

/// Sorted train-ID penultimate activations, for ReAct thresholds and the
/// DICE contribution matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    /// All units pooled, ascending.
    pub pooled_sorted: Vec<f64>,
    /// One ascending column per unit.
    pub per_unit_sorted: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    #[serde(default)]
    pub extractor_checksum: String,
}

impl ActivationStats {
    pub fn fit(train_features: &[Vec<f64>], extractor_checksum: impl Into<String>) -> Result<Self> {
        let d = train_features.first().map(Vec::len).ok_or_else(|| Error::EmptyCorpus("no train features".into()))?;
        if let Some(bad) = train_features.iter().find(|f| f.len() != d) {
            return Err(Error::Dimension { expected: d, got: bad.len() });
        }
        if train_features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("train activation".into()));
        }
        let n = train_features.len() as f64;
        let mut pooled: Vec<f64> = train_features.iter().flatten().copied().collect();
        pooled.sort_by(f64::total_cmp);
        let mut per_unit: Vec<Vec<f64>> = (0..d).map(|j| train_features.iter().map(|f| f[j]).collect()).collect();
        for col in &mut per_unit {
            col.sort_by(f64::total_cmp);
        }
        let mean = (0..d).map(|j| train_features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        Ok(ActivationStats { pooled_sorted: pooled, per_unit_sorted: per_unit, mean, extractor_checksum: extractor_checksum.into() })
    }
}

/// Linear-interpolation percentile of an ascending slice, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// ReAct clamp threshold(s): the `p`-th percentile of pooled (or per-unit)
/// train activations. `p >= 100` disables clamping (`+inf`), so test
/// activations above the train maximum are also left untouched.
pub fn react_threshold(acts: &ActivationStats, p: f64, per_unit: bool) -> Vec<f64> {
    let d = acts.mean.len();
    if p >= 100.0 {
        return vec![f64::INFINITY; d];
    }
    if per_unit {
        acts.per_unit_sorted.iter().map(|col| percentile(col, p)).collect()
    } else {
        vec![percentile(&acts.pooled_sorted, p); d]
    }
}

pub struct ReactRule {
    pub percentile: f64,
    pub base: BaseRule,
    pub per_unit: bool,
}

impl ReactRule {
    pub fn from_spec(spec: &RuleSpec) -> Result<Self> {
        let p = spec.percentile.unwrap_or(90.0);
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::Config(format!("react percentile {p} outside [0, 100]")));
        }
        Ok(ReactRule { percentile: p, base: spec.base.unwrap_or_default(), per_unit: spec.per_unit.unwrap_or(false) })
    }

    /// Base rule on the logits of `min(feature, clamp)`.
    pub fn score_feature(&self, params: &EncoderParams, feature: &[f64], clamp: &[f64]) -> Result<f64> {
        let clamped: Vec<f64> = feature.iter().zip(clamp).map(|(f, c)| f.min(*c)).collect();
        self.base.apply(&params.head_logits(&clamped, None))
    }
}

impl ScoringRule for ReactRule {
    fn spec(&self) -> RuleSpec {
        RuleSpec { per_unit: self.per_unit.then_some(true), ..RuleSpec::react(self.percentile, self.base) }
    }

    fn score(&self, ctx: &ScoringContext, inputs: &ScoringInputs) -> Result<Vec<f64>> {
        let acts = ctx.require_activations()?;
        let clamp = react_threshold(acts, self.percentile, self.per_unit);
        inputs.outputs.iter().map(|o| self.score_feature(ctx.params, &o.cls_feature, &clamp)).collect()
    }
}

/// DICE keep-mask over the `d x K` head: entries of the contribution matrix
/// `V[i][c] = mean[i] * W[i][c]` ranked descending (ties by lower flat
/// index); the top `ceil((100 - s)% of entries)` are kept, globally or
/// within each output column.
pub fn dice_keep_mask(mean: &[f64], weights: &[f64], k: usize, sparsity: f64, per_unit: bool) -> Result<Vec<bool>> {
    if !(0.0..100.0).contains(&sparsity) {
        return Err(Error::Config(format!("dice sparsity {sparsity} outside [0, 100)")));
    }
    let d = mean.len();
    if weights.len() != d * k {
        return Err(Error::Dimension { expected: d * k, got: weights.len() });
    }
    let contrib: Vec<f64> = (0..d * k).map(|i| mean[i / k] * weights[i]).collect();
    if contrib.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dice contribution".into()));
    }
    let keep_frac = (100.0 - sparsity) / 100.0;
    let mut mask = vec![false; d * k];
    let mut select = |idx: Vec<usize>| {
        let n_keep = ((keep_frac * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
        let mut idx = idx;
        idx.sort_by(|&a, &b| contrib[b].partial_cmp(&contrib[a]).unwrap().then(a.cmp(&b)));
        for &i in &idx[..n_keep] {
            mask[i] = true;
        }
    };
    if per_unit {
        for c in 0..k {
            select((0..d).map(|i| i * k + c).collect());
        }
    } else {
        select((0..d * k).collect());
    }
    Ok(mask)
}

pub struct DiceRule {
    pub sparsity: f64,
    pub base: BaseRule,
    pub per_unit: bool,
}

impl DiceRule {
    pub fn from_spec(spec: &RuleSpec) -> Result<Self> {
        let s = spec.sparsity.unwrap_or(90.0);
        if !(0.0..100.0).contains(&s) {
            return Err(Error::Config(format!("dice sparsity {s} outside [0, 100)")));
        }
        Ok(DiceRule { sparsity: s, base: spec.base.unwrap_or_default(), per_unit: spec.per_unit.unwrap_or(false) })
    }

    pub fn sparsified_weights(&self, params: &EncoderParams, acts: &ActivationStats) -> Result<Vec<f64>> {
        let w = params.head_weights();
        let mask = dice_keep_mask(&acts.mean, w, params.config.num_classes, self.sparsity, self.per_unit)?;
        Ok(w.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect())
    }
}

impl ScoringRule for DiceRule {
    fn spec(&self) -> RuleSpec {
        RuleSpec { per_unit: self.per_unit.then_some(true), ..RuleSpec::dice(self.sparsity, self.base) }
    }

    fn score(&self, ctx: &ScoringContext, inputs: &ScoringInputs) -> Result<Vec<f64>> {
        let acts = ctx.require_activations()?;
        let w = self.sparsified_weights(ctx.params, acts)?;
        inputs.outputs.iter().map(|o| self.base.apply(&ctx.params.head_logits(&o.cls_feature, Some(&w)))).collect()
    }
}
