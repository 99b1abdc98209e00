//! OOD scoring rules. Every rule is oriented so that a HIGHER score means
//! more ID-like:
//!
//! | rule     | score                                             |
//! |----------|---------------------------------------------------|
//! | `msp`    | max softmax probability                           |
//! | `energy` | `log sum_k exp(z_k)` (negative free energy)       |
//! | `maha`   | `max_k -(f - mu_k)^T P (f - mu_k)`, always `<= 0` |
//! | `odin`   | max softmax at temperature T after an embedding-space perturbation |
//! | `react`  | base rule on logits of the clamped feature `min(f, c)` |
//! | `dice`   | base rule on logits from a sparsified output head |
//!
//! Rules are trait objects created by name through [`RuleRegistry`].

mod rules;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use rules::{
    dice_keep_mask, odin_score, percentile, react_threshold, ActivationStats, DiceRule, EnergyRule, MahaRule, MspRule, OdinRule, ReactRule,
};

use crate::data::TokenizedExample;
use crate::encoder::{forward, EncoderOutput, EncoderParams};
use crate::gaussian::GaussianStats;
use crate::{Error, Result};

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn logsumexp(logits: &[f64]) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Dimension { expected: 2, got: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

pub fn msp_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(softmax(logits).into_iter().fold(0.0, f64::max))
}

pub fn energy_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(logsumexp(logits))
}

pub fn maha_rule_score(stats: &GaussianStats, feature: &[f64]) -> Result<f64> {
    crate::gaussian::mahalanobis_score(stats, feature)
}

/// Base rule applied to (possibly modified) logits by ReAct and DICE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseRule {
    #[default]
    Msp,
    Energy,
}

impl BaseRule {
    pub fn apply(self, logits: &[f64]) -> Result<f64> {
        match self {
            BaseRule::Msp => msp_score(logits),
            BaseRule::Energy => energy_score(logits),
        }
    }
}

/// Rule name plus whichever hyperparameters it uses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RuleSpec {
    pub rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentile: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseRule>,
    /// ReAct: per-unit thresholds; DICE: top-k within each output unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_unit: Option<bool>,
}

impl RuleSpec {
    pub fn named(rule: &str) -> Self {
        RuleSpec { rule: rule.to_string(), ..Default::default() }
    }

    pub fn odin(temperature: f64, epsilon: f64) -> Self {
        RuleSpec { temperature: Some(temperature), epsilon: Some(epsilon), ..Self::named("odin") }
    }

    pub fn react(percentile: f64, base: BaseRule) -> Self {
        RuleSpec { percentile: Some(percentile), base: Some(base), ..Self::named("react") }
    }

    pub fn dice(sparsity: f64, base: BaseRule) -> Self {
        RuleSpec { sparsity: Some(sparsity), base: Some(base), ..Self::named("dice") }
    }

    /// Short human-readable label, e.g. `odin(T=100,eps=0.01)`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.temperature {
            parts.push(format!("T={t}"));
        }
        if let Some(e) = self.epsilon {
            parts.push(format!("eps={e}"));
        }
        if let Some(p) = self.percentile {
            parts.push(format!("p={p}"));
        }
        if let Some(s) = self.sparsity {
            parts.push(format!("s={s}"));
        }
        if let Some(b) = self.base {
            parts.push(format!("base={}", if b == BaseRule::Msp { "msp" } else { "energy" }));
        }
        if self.per_unit == Some(true) {
            parts.push("per_unit".into());
        }
        if parts.is_empty() {
            self.rule.clone()
        } else {
            format!("{}({})", self.rule, parts.join(","))
        }
    }
}

/// Frozen artifacts a rule may read.
#[derive(Clone, Copy)]
pub struct ScoringContext<'a> {
    pub params: &'a EncoderParams,
    pub stats: Option<&'a GaussianStats>,
    pub activations: Option<&'a ActivationStats>,
}

impl<'a> ScoringContext<'a> {
    pub fn new(params: &'a EncoderParams) -> Self {
        ScoringContext { params, stats: None, activations: None }
    }

    pub fn require_stats(&self) -> Result<&'a GaussianStats> {
        self.stats.ok_or_else(|| Error::Invalid("Gaussian statistics not fitted".into()))
    }

    pub fn require_activations(&self) -> Result<&'a ActivationStats> {
        self.activations.ok_or_else(|| Error::Invalid("train activation statistics not fitted".into()))
    }

    /// Fails if any attached statistics were fitted on a different encoder.
    pub fn check_consistent(&self) -> Result<()> {
        let want = self.params.checksum();
        let sums = [
            ("gaussian stats", self.stats.map(|s| s.extractor_checksum.as_str())),
            ("activation stats", self.activations.map(|a| a.extractor_checksum.as_str())),
        ];
        for (what, sum) in sums {
            if let Some(found) = sum {
                if found != want {
                    return Err(Error::Checksum { artifact: what.into(), expected: want.clone(), found: found.into() });
                }
            }
        }
        Ok(())
    }
}

/// Examples with their inference-mode outputs, computed once and shared by
/// every rule evaluated on them.
pub struct ScoringInputs<'a> {
    pub examples: &'a [TokenizedExample],
    pub outputs: Vec<EncoderOutput>,
}

impl<'a> ScoringInputs<'a> {
    pub fn new(params: &EncoderParams, examples: &'a [TokenizedExample]) -> Result<Self> {
        Ok(ScoringInputs { examples, outputs: forward(params, examples)? })
    }
}

pub trait ScoringRule: Send + Sync {
    fn spec(&self) -> RuleSpec;

    /// One score per example, higher = more ID-like.
    fn score(&self, ctx: &ScoringContext, inputs: &ScoringInputs) -> Result<Vec<f64>>;
}

pub type RuleFactory = fn(&RuleSpec) -> Result<Box<dyn ScoringRule>>;

/// Name → constructor table for [`ScoringRule`]s.
pub struct RuleRegistry {
    factories: BTreeMap<String, RuleFactory>,
}

impl Default for RuleRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl RuleRegistry {
    pub fn empty() -> Self {
        RuleRegistry { factories: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("msp", |_| Ok(Box::new(MspRule)));
        r.register("energy", |_| Ok(Box::new(EnergyRule)));
        r.register("maha", |_| Ok(Box::new(MahaRule)));
        r.register("odin", |s| Ok(Box::new(OdinRule::from_spec(s)?)));
        r.register("react", |s| Ok(Box::new(ReactRule::from_spec(s)?)));
        r.register("dice", |s| Ok(Box::new(DiceRule::from_spec(s)?)));
        r
    }

    pub fn register(&mut self, name: &str, factory: RuleFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn create(&self, spec: &RuleSpec) -> Result<Box<dyn ScoringRule>> {
        let f = self.factories.get(&spec.rule).ok_or_else(|| Error::Unknown { kind: "scoring rule", name: spec.rule.clone() })?;
        f(spec)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

/// Paired ID/OOD detection scores under one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub rule: String,
    pub hyperparameters: RuleSpec,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    #[serde(default)]
    pub artifact_checksums: BTreeMap<String, String>,
}

impl ScoreSet {
    pub fn new(spec: &RuleSpec, id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = id_scores.iter().chain(&ood_scores).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score {bad} under {}", spec.label())));
        }
        Ok(ScoreSet { rule: spec.rule.clone(), hyperparameters: spec.clone(), id_scores, ood_scores, artifact_checksums: BTreeMap::new() })
    }

    pub fn label(&self) -> String {
        self.hyperparameters.label()
    }
}

/// Scores precomputed ID and OOD inputs with one rule.
pub fn score_inputs(
    registry: &RuleRegistry,
    ctx: &ScoringContext,
    spec: &RuleSpec,
    id: &ScoringInputs,
    ood: &ScoringInputs,
) -> Result<ScoreSet> {
    ctx.check_consistent()?;
    let rule = registry.create(spec)?;
    let mut set = ScoreSet::new(&rule.spec(), rule.score(ctx, id)?, rule.score(ctx, ood)?)?;
    set.artifact_checksums.insert("encoder".into(), ctx.params.checksum());
    Ok(set)
}

/// Runs the forward passes and scores an ID test split against an OOD test
/// split.
pub fn score_corpus(
    registry: &RuleRegistry,
    ctx: &ScoringContext,
    id_test: &[TokenizedExample],
    ood_test: &[TokenizedExample],
    spec: &RuleSpec,
) -> Result<ScoreSet> {
    let id = ScoringInputs::new(ctx.params, id_test)?;
    let ood = ScoringInputs::new(ctx.params, ood_test)?;
    score_inputs(registry, ctx, spec, &id, &ood)
}

/// Hyperparameter grids for the tuned post-hoc baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineGrid {
    pub odin_temperatures: Vec<f64>,
    pub odin_epsilons: Vec<f64>,
    pub dice_sparsities: Vec<f64>,
    pub react_percentiles: Vec<f64>,
}

impl Default for BaselineGrid {
    fn default() -> Self {
        BaselineGrid {
            odin_temperatures: vec![5.0, 50.0, 100.0, 500.0, 1000.0],
            odin_epsilons: vec![0.001, 0.01, 0.1, 1.0],
            dice_sparsities: vec![10.0, 30.0, 50.0, 90.0, 99.0],
            react_percentiles: vec![80.0, 85.0, 90.0, 95.0, 99.0],
        }
    }
}

impl BaselineGrid {
    /// Grid points for `odin`, `react` or `dice`, in listing order.
    pub fn points(&self, baseline: &str, base: BaseRule) -> Result<Vec<RuleSpec>> {
        Ok(match baseline {
            "odin" => self.odin_temperatures.iter().flat_map(|&t| self.odin_epsilons.iter().map(move |&e| RuleSpec::odin(t, e))).collect(),
            "react" => self.react_percentiles.iter().map(|&p| RuleSpec::react(p, base)).collect(),
            "dice" => self.dice_sparsities.iter().map(|&s| RuleSpec::dice(s, base)).collect(),
            other => return Err(Error::Unknown { kind: "tuned baseline", name: other.into() }),
        })
    }
}
