//! Token-ranking strategies for surrogate construction, registered by name.

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedExample;
use crate::encoder::{forward, EncoderOutput, EncoderParams};
use crate::scoring::softmax;
use crate::{Error, Result};

/// Orders the maskable positions of an example, most class-relevant first.
pub trait TokenRanker: Send + Sync {
    fn name(&self) -> &str;

    /// `output` must come from `params` applied to `example`. Returns a
    /// permutation of `example.maskable_positions()`.
    fn rank(&self, example: &TokenizedExample, output: &EncoderOutput, params: &EncoderParams) -> Result<Vec<usize>>;
}

fn check_output(example: &TokenizedExample, output: &EncoderOutput, params: &EncoderParams) -> Result<()> {
    if output.cls_attention.len() != example.len {
        return Err(Error::Dimension { expected: example.len, got: output.cls_attention.len() });
    }
    if output.logits.len() != params.config.num_classes {
        return Err(Error::Dimension { expected: params.config.num_classes, got: output.logits.len() });
    }
    Ok(())
}

/// Stable descending sort of `(position, key)` pairs; ties keep the lower
/// position first.
fn descending(positions: Vec<usize>, keys: &[f64]) -> Vec<usize> {
    let mut pairs: Vec<(usize, f64)> = positions.into_iter().zip(keys.iter().copied()).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.into_iter().map(|(p, _)| p).collect()
}

/// Highest `[CLS]` attention first.
pub struct AttentionRanker;

impl TokenRanker for AttentionRanker {
    fn name(&self) -> &str {
        "attention"
    }

    fn rank(&self, example: &TokenizedExample, output: &EncoderOutput, params: &EncoderParams) -> Result<Vec<usize>> {
        check_output(example, output, params)?;
        Ok(descending(example.maskable_positions(), &output.cls_attention))
    }
}

/// Seeded uniform shuffle. The stream depends on the seed and the example's
/// token ids, so identical inputs get identical orders.
pub struct RandomRanker {
    pub seed: u64,
}

impl TokenRanker for RandomRanker {
    fn name(&self) -> &str {
        "random"
    }

    fn rank(&self, example: &TokenizedExample, output: &EncoderOutput, params: &EncoderParams) -> Result<Vec<usize>> {
        check_output(example, output, params)?;
        let mut h = Sha256::new();
        for id in &example.ids {
            h.update(id.to_le_bytes());
        }
        let digest = h.finalize();
        let ids_hash = u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ids_hash);
        let mut order = example.maskable_positions();
        order.shuffle(&mut rng);
        Ok(order)
    }
}

/// Largest drop in gold-class probability when the single token is masked.
pub struct LeaveOneOutRanker;

impl LeaveOneOutRanker {
    /// Gold-class probability drop for masking each maskable position alone,
    /// in position order.
    pub fn drops(example: &TokenizedExample, output: &EncoderOutput, params: &EncoderParams) -> Result<Vec<f64>> {
        let base = softmax(&output.logits)[example.label];
        let singles: Vec<TokenizedExample> = example.maskable_positions().into_iter().map(|p| example.with_masked(&[p])).collect();
        Ok(forward(params, &singles)?.iter().map(|o| base - softmax(&o.logits)[example.label]).collect())
    }
}

impl TokenRanker for LeaveOneOutRanker {
    fn name(&self) -> &str {
        "loo"
    }

    fn rank(&self, example: &TokenizedExample, output: &EncoderOutput, params: &EncoderParams) -> Result<Vec<usize>> {
        check_output(example, output, params)?;
        if example.label >= params.config.num_classes {
            return Err(Error::Label { label: example.label, max: params.config.num_classes - 1 });
        }
        let drops = Self::drops(example, output, params)?;
        Ok(descending(example.maskable_positions(), &drops))
    }
}

/// Serializable choice of ranking strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStrategy {
    pub kind: String,
    #[serde(default)]
    pub seed: u64,
}

impl MaskStrategy {
    pub fn new(kind: impl Into<String>, seed: u64) -> Self {
        MaskStrategy { kind: kind.into(), seed }
    }

    pub fn attention() -> Self {
        MaskStrategy::new("attention", 0)
    }

    pub fn build(&self, registry: &StrategyRegistry) -> Result<Box<dyn TokenRanker>> {
        registry.create(&self.kind, self)
    }
}

pub type RankerFactory = fn(&MaskStrategy) -> Box<dyn TokenRanker>;

/// Name → constructor table for [`TokenRanker`]s.
pub struct StrategyRegistry {
    factories: BTreeMap<String, RankerFactory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry { factories: BTreeMap::new() }
    }

    /// `attention`, `random` and `loo` (alias `leave_one_out`).
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("attention", |_| Box::new(AttentionRanker));
        r.register("random", |s| Box::new(RandomRanker { seed: s.seed }));
        r.register("loo", |_| Box::new(LeaveOneOutRanker));
        r.register("leave_one_out", |_| Box::new(LeaveOneOutRanker));
        r
    }

    /// Registers (or replaces) a strategy under `name`.
    pub fn register(&mut self, name: &str, factory: RankerFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn create(&self, name: &str, strategy: &MaskStrategy) -> Result<Box<dyn TokenRanker>> {
        let f = self.factories.get(name).ok_or_else(|| Error::Unknown { kind: "masking strategy", name: name.to_string() })?;
        Ok(f(strategy))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}
