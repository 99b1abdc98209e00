//! Rejection-network training: the trained classifier is re-trained on
//! batches of ID rows plus surrogate OOD rows, with cross-entropy on the ID
//! rows and a (K+1)-class margin contrastive loss on the `[CLS]` features of
//! every row. The K-way output head is kept as is.
//!
//! Margin loss over a batch of `B` rows with `d`-dimensional features:
//!
//! ```text
//! L_p = sum_i 1/|P(i)| sum_{p in P(i)} |f_i - f_p|^2
//! L_n = sum_i 1/|N(i)| sum_{n in N(i)} relu(xi - |f_i - f_n|^2)
//! xi  = max over positive pairs of |f_i - f_p|^2
//! L_margin = (L_p + L_n) / (d B)
//! ```
//!
//! `P(i)` holds the other rows with the same label, `N(i)` the rows with a
//! different label; the OOD label K is an ordinary class here.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, TokenizedExample};
use crate::encoder::{cross_entropy, train_with_hook, BatchGrad, BatchView, EncoderParams, EpochLog, StepLoss, TrainConfig};
use crate::poe::{replace_masks, SurrogateExample};
use crate::{Error, Result};

/// Per-step loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_p: f64,
    pub l_n: f64,
    pub l_margin: f64,
    /// KL-to-uniform term of the CE+KL ablation (0 otherwise).
    #[serde(default)]
    pub l_kl: f64,
    pub l_total: f64,
    pub xi: f64,
}

impl LossBreakdown {
    fn to_step(self) -> StepLoss {
        let mut components = BTreeMap::new();
        for (k, v) in
            [("l_ce", self.l_ce), ("l_p", self.l_p), ("l_n", self.l_n), ("l_margin", self.l_margin), ("l_kl", self.l_kl), ("xi", self.xi)]
        {
            components.insert(k.to_string(), v);
        }
        StepLoss { total: self.l_total, components }
    }

    pub fn from_step(step: &StepLoss) -> Self {
        let c = |k: &str| step.components.get(k).copied().unwrap_or(0.0);
        LossBreakdown {
            l_ce: c("l_ce"),
            l_p: c("l_p"),
            l_n: c("l_n"),
            l_margin: c("l_margin"),
            l_kl: c("l_kl"),
            l_total: step.total,
            xi: c("xi"),
        }
    }
}

/// How the margin `xi` enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiGradient {
    /// `xi` is a constant of the batch. Used for training.
    #[default]
    Detached,
    /// Includes the subgradient through the arg-max positive pair.
    Full,
}

/// Margin loss value and its gradient w.r.t. each feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginLoss {
    pub l_p: f64,
    pub l_n: f64,
    pub l_margin: f64,
    pub xi: f64,
    pub grad: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Margin contrastive loss with `xi` detached. Labels must lie in `[0, K]`.
pub fn mcl_loss(features: &[&[f64]], labels: &[usize], num_classes: usize) -> Result<MarginLoss> {
    mcl_loss_with(features, labels, num_classes, XiGradient::Detached)
}

pub fn mcl_loss_with(features: &[&[f64]], labels: &[usize], num_classes: usize, xi_mode: XiGradient) -> Result<MarginLoss> {
    let b = features.len();
    if b < 2 {
        return Err(Error::Invalid(format!("margin loss needs at least 2 rows, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::Dimension { expected: b, got: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > num_classes) {
        return Err(Error::Label { label: bad, max: num_classes });
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::Dimension { expected: d, got: f.len() });
    }
    if d == 0 {
        return Err(Error::Invalid("zero-dimensional features".into()));
    }

    let dist: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| sq_dist(features[i], features[j])).collect()).collect();
    let mut xi = 0.0;
    let mut xi_pair = None;
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i] == labels[j] && (xi_pair.is_none() || dist[i][j] > xi) {
                xi = dist[i][j];
                xi_pair = Some((i, j));
            }
        }
    }

    let mut grad = vec![vec![0.0; d]; b];
    // adds s * 2 (f_i - f_j) to row i and its negation to row j
    let pull = |grad: &mut Vec<Vec<f64>>, i: usize, j: usize, s: f64| {
        for t in 0..d {
            let g = 2.0 * s * (features[i][t] - features[j][t]);
            grad[i][t] += g;
            grad[j][t] -= g;
        }
    };
    let (mut l_p, mut l_n) = (0.0, 0.0);
    let mut xi_weight = 0.0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
        if !pos.is_empty() {
            let w = 1.0 / pos.len() as f64;
            for &p in &pos {
                l_p += w * dist[i][p];
                pull(&mut grad, i, p, w);
            }
        }
        if !neg.is_empty() {
            let w = 1.0 / neg.len() as f64;
            for &n in &neg {
                let gap = xi - dist[i][n];
                if gap > 0.0 {
                    l_n += w * gap;
                    pull(&mut grad, i, n, -w);
                    xi_weight += w;
                }
            }
        }
    }
    if xi_mode == XiGradient::Full {
        if let Some((i, j)) = xi_pair {
            pull(&mut grad, i, j, xi_weight);
        }
    }
    let scale = 1.0 / (d * b) as f64;
    for row in &mut grad {
        row.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(MarginLoss { l_p, l_n, l_margin: (l_p + l_n) * scale, xi, grad })
}

/// Mean over rows of `KL(softmax(z) || uniform over K)` and its gradient.
pub fn kl_uniform_loss(logits: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let k = logits[0].len();
    if k < 2 {
        return Err(Error::Dimension { expected: 2, got: k });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for z in logits {
        if z.len() != k {
            return Err(Error::Dimension { expected: k, got: z.len() });
        }
        let lse = crate::scoring::logsumexp(z);
        let logp: Vec<f64> = z.iter().map(|v| v - lse).collect();
        let neg_h: f64 = logp.iter().map(|lp| lp.exp() * lp).sum();
        loss += neg_h + (k as f64).ln();
        grads.push(logp.iter().map(|lp| lp.exp() * (lp - neg_h) / n).collect());
    }
    Ok((loss / n, grads))
}

/// Rejection-network training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[serde(alias = "ce_only")]
    Ce,
    CeKl,
    #[default]
    CeMcl,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Ce, Objective::CeKl, Objective::CeMcl];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::CeKl => "ce_kl",
            Objective::CeMcl => "ce_mcl",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "ce_only" => Ok(Objective::Ce),
            "ce_kl" => Ok(Objective::CeKl),
            "ce_mcl" => Ok(Objective::CeMcl),
            other => Err(Error::Unknown { kind: "objective", name: other.into() }),
        }
    }
}

/// Loss and feature/logit gradients for one batch: CE on the ID rows plus
/// the objective's extra term.
pub fn rejection_step(view: &BatchView, objective: Objective) -> Result<BatchGrad> {
    let b = view.logits.len();
    let k = view.logits.first().map_or(0, |l| l.len());
    let d = view.features.first().map_or(0, |f| f.len());
    let (l_ce, ce_grads) = cross_entropy(&view.logits[..view.n_id], &view.labels[..view.n_id]);
    let mut dlogits = ce_grads;
    dlogits.resize(b, vec![0.0; k]);
    let mut dfeature = vec![vec![0.0; d]; b];
    let mut lb = LossBreakdown { l_ce, ..Default::default() };
    match objective {
        Objective::Ce => {}
        Objective::CeKl => {
            let (kl, g) = kl_uniform_loss(&view.logits[view.n_id..])?;
            lb.l_kl = kl;
            for (row, gr) in dlogits[view.n_id..].iter_mut().zip(g) {
                row.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
        }
        Objective::CeMcl if b >= 2 => {
            let m = mcl_loss(&view.features, view.labels, k)?;
            lb.l_p = m.l_p;
            lb.l_n = m.l_n;
            lb.l_margin = m.l_margin;
            lb.xi = m.xi;
            dfeature = m.grad;
        }
        Objective::CeMcl => {}
    }
    lb.l_total = lb.l_ce + lb.l_margin + lb.l_kl;
    Ok(BatchGrad { loss: lb.to_step(), dfeature, dlogits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RejectionConfig {
    pub objective: Objective,
    /// Surrogate rows per batch; the ID rows per batch are `batch_size` of
    /// the train config.
    pub b_o: usize,
    /// Replace `[MASK]` tokens of each drawn surrogate with random regular
    /// tokens.
    pub replace_masks: bool,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        RejectionConfig { objective: Objective::CeMcl, b_o: 4, replace_masks: true }
    }
}

#[derive(Debug, Clone)]
pub struct RejectionOutcome {
    pub params: EncoderParams,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<LossBreakdown>,
}

const OOD_STREAM: u64 = 0x00d5_a3b1_e000_0000;

/// Warm-started rejection training. Each batch appends `b_o` surrogates
/// drawn uniformly with replacement, independently of the ID rows, from a
/// random stream separate from batching and dropout; every draw gets a
/// fresh mask replacement.
pub fn train_rejection(
    init: EncoderParams,
    corpus: &Corpus,
    surrogates: &[SurrogateExample],
    tc: &TrainConfig,
    rc: &RejectionConfig,
) -> Result<RejectionOutcome> {
    let k = init.config.num_classes;
    let vocab_size = init.config.vocab_size;
    if rc.b_o > 0 && surrogates.is_empty() {
        return Err(Error::Invalid("b_o > 0 but the surrogate set is empty".into()));
    }
    if rc.objective != Objective::Ce && (rc.b_o == 0 || surrogates.is_empty()) {
        return Err(Error::Invalid(format!("objective {} needs surrogate rows (b_o >= 1)", rc.objective)));
    }
    if let Some(s) = surrogates.iter().find(|s| s.tokens.label != k) {
        return Err(Error::Label { label: s.tokens.label, max: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ OOD_STREAM);
    let mut failure = None;
    let mut extra = |_epoch: usize, _step: usize| -> Vec<TokenizedExample> {
        (0..rc.b_o)
            .filter_map(|_| {
                let s = &surrogates[rng.gen_range(0..surrogates.len())];
                if !rc.replace_masks {
                    return Some(s.tokens.clone());
                }
                match replace_masks(&s.tokens, vocab_size, &mut rng) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        failure.get_or_insert(e);
                        None
                    }
                }
            })
            .collect()
    };
    let objective = rc.objective;
    let out = train_with_hook(init, corpus, tc, &mut extra, &|v| rejection_step(v, objective))?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RejectionOutcome { params: out.params, epochs: out.epochs, steps: out.steps.iter().map(LossBreakdown::from_step).collect() })
}

#[cfg(test)]
mod tests;
