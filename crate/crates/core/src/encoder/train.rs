use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backward, forward, forward_cached, EncoderParams, ForwardCache, Layout};
use crate::data::{BatchIter, Corpus, TokenizedExample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// From-scratch defaults: no pre-training, so a larger step size.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
        }
    }

    /// Fine-tuning values for a pre-trained encoder (AdamW, lr 2e-5, weight
    /// decay 0.01, 10 epochs).
    pub fn fine_tune() -> Self {
        TrainConfig { learning_rate: 2e-5, ..TrainConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay applied to matrix parameters only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decayed: Vec<std::ops::Range<usize>>,
}

impl AdamW {
    pub fn new(layout: &Layout) -> Self {
        AdamW { m: vec![0.0; layout.total], v: vec![0.0; layout.total], t: 0, decayed: layout.decayed() }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], tc: &TrainConfig) {
        self.t += 1;
        let lr = tc.learning_rate;
        for r in &self.decayed {
            for p in &mut params[r.clone()] {
                *p -= lr * tc.weight_decay * *p;
            }
        }
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = tc.beta1 * self.m[i] + (1.0 - tc.beta1) * g;
            self.v[i] = tc.beta2 * self.v[i] + (1.0 - tc.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + tc.adam_eps);
        }
    }
}

/// Mean cross-entropy over `rows` and its gradient w.r.t. each row's logits.
pub fn cross_entropy(logits: &[&[f64]], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - z[y];
            z.iter().enumerate().map(|(k, v)| ((v - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n).collect()
        })
        .collect();
    (loss / n, grads)
}

/// One optimisation step's loss, with named components for logging.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub dev_loss: Option<f64>,
    pub dev_acc: Option<f64>,
    /// Step-averaged loss components.
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLoss>,
}

/// A training batch as seen by an objective: the first `n_id` rows are ID
/// examples; the rest are extra rows supplied by the batch hook.
pub struct BatchView<'a> {
    pub features: Vec<&'a [f64]>,
    pub logits: Vec<&'a [f64]>,
    pub labels: &'a [usize],
    pub n_id: usize,
}

pub struct BatchGrad {
    pub loss: StepLoss,
    pub dfeature: Vec<Vec<f64>>,
    pub dlogits: Vec<Vec<f64>>,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const GRAD_CHUNK: usize = 4;

/// Forward with dropout, evaluate the objective, backprop, and sum the
/// per-example gradients in a fixed order.
pub(crate) fn batch_gradient(
    params: &EncoderParams,
    layout: &Layout,
    examples: &[TokenizedExample],
    labels: &[usize],
    n_id: usize,
    dropout_seed: Option<u64>,
    objective: &dyn Fn(&BatchView) -> Result<BatchGrad>,
) -> Result<(StepLoss, Vec<f64>)> {
    let caches: Vec<ForwardCache> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| match dropout_seed {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[s, i as u64]));
                forward_cached(params, layout, ex, None, Some(&mut rng))
            }
            None => forward_cached(params, layout, ex, None, None),
        })
        .collect();
    let view = BatchView {
        features: caches.iter().map(|c| c.feature.as_slice()).collect(),
        logits: caches.iter().map(|c| c.logits.as_slice()).collect(),
        labels,
        n_id,
    };
    let g = objective(&view)?;
    let idx: Vec<usize> = (0..examples.len()).collect();
    let partial: Vec<Vec<f64>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; layout.total];
            for &i in chunk {
                backward(params, layout, &examples[i], &caches[i], &g.dfeature[i], &g.dlogits[i], &mut acc);
            }
            acc
        })
        .collect();
    let mut grads = vec![0.0; layout.total];
    for p in &partial {
        for (a, b) in grads.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok((g.loss, grads))
}

/// Cross-entropy over the ID rows only; extra rows get zero gradient.
pub(crate) fn ce_objective(view: &BatchView) -> Result<BatchGrad> {
    let k = view.logits.first().map_or(0, |l| l.len());
    let d = view.features.first().map_or(0, |f| f.len());
    let (ce, ce_grads) = cross_entropy(&view.logits[..view.n_id], &view.labels[..view.n_id]);
    let mut dlogits = ce_grads;
    dlogits.resize(view.logits.len(), vec![0.0; k]);
    let mut loss = StepLoss { total: ce, ..Default::default() };
    loss.components.insert("ce".into(), ce);
    Ok(BatchGrad { loss, dfeature: vec![vec![0.0; d]; view.logits.len()], dlogits })
}

fn evaluate_split(params: &EncoderParams, xs: &[TokenizedExample]) -> Result<(f64, f64)> {
    let outs = forward(params, xs)?;
    let logits: Vec<&[f64]> = outs.iter().map(|o| o.logits.as_slice()).collect();
    let labels: Vec<usize> = xs.iter().map(|e| e.label).collect();
    let (loss, _) = cross_entropy(&logits, &labels);
    let correct = outs.iter().zip(&labels).filter(|(o, &y)| crate::scoring::argmax(&o.logits) == y).count();
    Ok((loss, correct as f64 / xs.len().max(1) as f64))
}

fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Shared training loop. Each epoch shuffles the ID train split into
/// batches; `extra_rows(epoch, step)` may append further rows (labelled by
/// the caller) which the `objective` sees after the ID rows.
pub fn train_with_hook(
    mut params: EncoderParams,
    corpus: &Corpus,
    tc: &TrainConfig,
    extra_rows: &mut dyn FnMut(usize, usize) -> Vec<TokenizedExample>,
    objective: &dyn Fn(&BatchView) -> Result<BatchGrad>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let train = corpus.require_train()?;
    if corpus.num_classes != params.config.num_classes {
        return Err(Error::Dimension { expected: params.config.num_classes, got: corpus.num_classes });
    }
    for ex in train.iter().chain(&corpus.dev) {
        params.check_example(ex)?;
    }
    let layout = params.layout();
    let mut opt = AdamW::new(&layout);
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut steps = Vec::new();
    for epoch in 0..tc.epochs {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        let mut n_steps = 0usize;
        for (step, idx) in BatchIter::new(train.len(), tc.batch_size, tc.seed, epoch).enumerate() {
            let mut batch: Vec<TokenizedExample> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let n_id = batch.len();
            for ex in extra_rows(epoch, step) {
                labels.push(ex.label);
                batch.push(ex);
            }
            let dseed = mix_seed(&[tc.seed, epoch as u64, step as u64]);
            let (loss, mut grads) = batch_gradient(&params, &layout, &batch, &labels, n_id, Some(dseed), objective)?;
            let gn = grad_norm(&grads);
            if !loss.total.is_finite() || !gn.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} step {step}: loss {} grad-norm {gn} components {:?}",
                    loss.total, loss.components
                )));
            }
            if tc.max_grad_norm > 0.0 && gn > tc.max_grad_norm {
                let s = tc.max_grad_norm / gn;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            opt.step(&mut params.values, &grads, tc);
            total += loss.total;
            for (k, v) in &loss.components {
                *sums.entry(k.clone()).or_default() += v;
            }
            n_steps += 1;
            steps.push(loss);
        }
        let (train_loss_eval, train_acc) = evaluate_split(&params, train)?;
        let (dev_loss, dev_acc) = if corpus.dev.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_split(&params, &corpus.dev)?;
            (Some(l), Some(a))
        };
        let components = sums.into_iter().map(|(k, v)| (k, v / n_steps as f64)).collect();
        log::debug!(
            "epoch {epoch}: step loss {:.4}, train ce {train_loss_eval:.4} acc {train_acc:.3}, dev {dev_acc:?}",
            total / n_steps as f64
        );
        epochs.push(EpochLog { epoch, train_loss: total / n_steps as f64, train_acc, dev_loss, dev_acc, components });
    }
    Ok(TrainOutcome { params, epochs, steps })
}

/// Supervised training with cross-entropy on the train split.
pub fn train_classifier(params: EncoderParams, corpus: &Corpus, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(params, corpus, tc, &mut |_, _| Vec::new(), &ce_objective)
}
