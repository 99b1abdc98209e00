//! Detection metrics, hyperparameter grid search and report tables.
//!
//! Scores follow the scoring-module orientation (higher = more ID-like), so
//! ID samples are the positive class throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::scoring::{RuleSpec, ScoreSet};
use crate::{Error, Result};

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptyCorpus(format!("need ID and OOD scores, got {} and {}", id.len(), ood.len())));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("detection score".into()));
    }
    Ok(())
}

/// Probability that a random ID score exceeds a random OOD score, counting
/// ties as one half. Computed with sorted OOD scores and integer pair
/// counts, so it equals the pairwise statistic up to the final division.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut sorted = ood.to_vec();
    sorted.sort_by(f64::total_cmp);
    // twice the number of (id > ood) pairs plus the tied pairs
    let mut twice: u128 = 0;
    for &x in id {
        let below = sorted.partition_point(|&o| o < x) as u128;
        let not_above = sorted.partition_point(|&o| o <= x) as u128;
        twice += 2 * below + (not_above - below);
    }
    Ok(twice as f64 / (2.0 * id.len() as f64 * ood.len() as f64))
}

/// Fraction of OOD scores at or above the largest threshold that keeps at
/// least 95% of ID scores at or above it.
pub fn fpr_at_95_tpr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut desc = id.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let n = desc.len();
    // smallest k with k / n >= 0.95, in integers
    let k = (19 * n).div_ceil(20);
    let t = desc[k - 1];
    Ok(ood.iter().filter(|&&o| o >= t).count() as f64 / ood.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pipeline that produced the network, e.g. `ce` or `poe`.
    pub method: String,
    pub rule: String,
    pub hyperparameters: RuleSpec,
    pub seed: u64,
    pub id_corpus: String,
    pub ood_corpus: String,
    pub n_id: usize,
    pub n_ood: usize,
    pub auroc: f64,
    pub fpr95: f64,
    /// Hyperparameters were selected on this very test pair.
    #[serde(default)]
    pub tuned_on_test: bool,
}

impl EvalReport {
    pub fn from_scores(method: &str, scores: &ScoreSet, seed: u64, id_corpus: &str, ood_corpus: &str) -> Result<Self> {
        Ok(EvalReport {
            method: method.to_string(),
            rule: scores.rule.clone(),
            hyperparameters: scores.hyperparameters.clone(),
            seed,
            id_corpus: id_corpus.to_string(),
            ood_corpus: ood_corpus.to_string(),
            n_id: scores.id_scores.len(),
            n_ood: scores.ood_scores.len(),
            auroc: auroc(&scores.id_scores, &scores.ood_scores)?,
            fpr95: fpr_at_95_tpr(&scores.id_scores, &scores.ood_scores)?,
            tuned_on_test: false,
        })
    }

    /// `method+rule`, e.g. `poe+maha`.
    pub fn key(&self) -> String {
        format!("{}+{}", self.method, self.rule)
    }
}

/// Evaluates every grid point and keeps the best: highest AUROC, then
/// lowest FPR@95, then the earliest listed. The chosen report is flagged as
/// tuned on the test pair. Returns the winner and all evaluated reports.
pub fn grid_search(
    points: &[RuleSpec],
    evaluate: &mut dyn FnMut(&RuleSpec) -> Result<EvalReport>,
) -> Result<(EvalReport, Vec<EvalReport>)> {
    if points.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let all: Vec<EvalReport> = points.iter().map(evaluate).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in all.iter().enumerate().skip(1) {
        let b = &all[best];
        if r.auroc > b.auroc || (r.auroc == b.auroc && r.fpr95 < b.fpr95) {
            best = i;
        }
    }
    let mut winner = all[best].clone();
    winner.tuned_on_test = true;
    Ok((winner, all))
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for a single
/// value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub key: String,
    pub ood_corpus: String,
    pub runs: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub fpr95_mean: f64,
    pub fpr95_std: f64,
    pub tuned_on_test: bool,
}

/// Groups reports by `method+rule` and OOD corpus, in first-seen order.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        let k = (r.key(), r.ood_corpus.clone());
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let rs = &groups[&k];
            let (am, asd) = mean_std(&rs.iter().map(|r| r.auroc).collect::<Vec<_>>());
            let (fm, fsd) = mean_std(&rs.iter().map(|r| r.fpr95).collect::<Vec<_>>());
            AggregateRow {
                key: k.0,
                ood_corpus: k.1,
                runs: rs.len(),
                auroc_mean: am,
                auroc_std: asd,
                fpr95_mean: fm,
                fpr95_std: fsd,
                tuned_on_test: rs.iter().any(|r| r.tuned_on_test),
            }
        })
        .collect()
}

/// Markdown table in percent, `mean ± std`. Rows tuned on the test pair
/// are marked with `*`.
pub fn markdown_table(title: &str, rows: &[AggregateRow]) -> String {
    let mut s = format!("### {title}\n\n| method | OOD | runs | AUROC (%) | FPR@95 (%) |\n|---|---|---|---|---|\n");
    for r in rows {
        let mark = if r.tuned_on_test { "*" } else { "" };
        let _ = writeln!(
            s,
            "| {}{mark} | {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
            r.key,
            r.ood_corpus,
            r.runs,
            100.0 * r.auroc_mean,
            100.0 * r.auroc_std,
            100.0 * r.fpr95_mean,
            100.0 * r.fpr95_std
        );
    }
    if rows.iter().any(|r| r.tuned_on_test) {
        s.push_str("\n`*` hyperparameters selected on the test OOD pair (optimistic).\n");
    }
    s
}

pub fn csv_table(rows: &[AggregateRow]) -> String {
    let mut s = String::from("method,ood_corpus,runs,auroc_mean,auroc_std,fpr95_mean,fpr95_std,tuned_on_test\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.key, r.ood_corpus, r.runs, r.auroc_mean, r.auroc_std, r.fpr95_mean, r.fpr95_std, r.tuned_on_test
        );
    }
    s
}
