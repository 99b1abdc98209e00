use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, PreparedData};
use crate::artifact::{write_artifact, write_file};
use crate::encoder::{features, init_encoder, train_classifier, EncoderParams, EpochLog};
use crate::eval::{aggregate, csv_table, grid_search, markdown_table, mean_std, EvalReport};
use crate::gaussian::{fit_from_encoder, GaussianStats};
use crate::poe::{construct_surrogate_set, ConstructOptions, MaskStrategy, StrategyRegistry, SurrogateSet};
use crate::rejection::{train_rejection, LossBreakdown, Objective, RejectionConfig};
use crate::scoring::{score_inputs, ActivationStats, RuleRegistry, RuleSpec, ScoringContext, ScoringInputs};
use crate::Result;

/// One rejection-network recipe: how surrogates are built and how the
/// network is trained on them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub strategy: String,
    pub stop_offset: usize,
    pub objective: Objective,
    pub replace_masks: bool,
}

impl Variant {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Variant {
            strategy: cfg.strategy.clone(),
            stop_offset: cfg.construct.stop_offset,
            objective: cfg.rejection.objective,
            replace_masks: cfg.rejection.replace_masks,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RejectionResult {
    pub params: EncoderParams,
    /// Re-fitted on the rejection network's train features.
    pub stats: GaussianStats,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<LossBreakdown>,
}

/// Everything derived from one seed, with surrogate sets and rejection
/// networks cached by recipe so that experiments, sweeps and ablations can
/// share them.
pub struct SeedRun<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a PreparedData,
    pub seed: u64,
    pub classifier: EncoderParams,
    pub classifier_epochs: Vec<EpochLog>,
    pub stats: GaussianStats,
    pub activations: ActivationStats,
    surrogates: HashMap<(String, usize), Rc<SurrogateSet>>,
    rejections: HashMap<Variant, Rc<RejectionResult>>,
}

impl<'a> SeedRun<'a> {
    /// Trains the CE classifier and fits its feature statistics.
    pub fn new(cfg: &'a ExperimentConfig, data: &'a PreparedData, seed: u64) -> Result<Self> {
        let ecfg = cfg.encoder_config(data.vocab.size(), data.corpus.num_classes, seed);
        log::info!("seed {seed}: training classifier ({} epochs)", cfg.classifier.epochs);
        let out = train_classifier(init_encoder(ecfg)?, &data.corpus, &cfg.classifier_train(seed))?;
        Self::from_classifier(cfg, data, seed, out.params, out.epochs)
    }

    pub fn from_classifier(
        cfg: &'a ExperimentConfig,
        data: &'a PreparedData,
        seed: u64,
        classifier: EncoderParams,
        classifier_epochs: Vec<EpochLog>,
    ) -> Result<Self> {
        let stats = fit_from_encoder(&classifier, &data.corpus.train, cfg.shrinkage)?;
        let activations = ActivationStats::fit(&features(&classifier, &data.corpus.train)?, classifier.checksum())?;
        Ok(SeedRun {
            cfg,
            data,
            seed,
            classifier,
            classifier_epochs,
            stats,
            activations,
            surrogates: HashMap::new(),
            rejections: HashMap::new(),
        })
    }

    pub fn surrogates(&mut self, strategy: &str, stop_offset: usize) -> Result<Rc<SurrogateSet>> {
        let key = (strategy.to_string(), stop_offset);
        if let Some(s) = self.surrogates.get(&key) {
            return Ok(s.clone());
        }
        let ranker = MaskStrategy::new(strategy, self.seed).build(&StrategyRegistry::with_builtins())?;
        let opts = ConstructOptions { stop_offset, ..self.cfg.construct.clone() };
        let set = Rc::new(construct_surrogate_set(&self.data.corpus.train, &self.classifier, &self.stats, &*ranker, &opts)?);
        let s = &set.summary;
        log::info!(
            "seed {}: {strategy} surrogates (offset {stop_offset}): {} built, {:.0}% exceeded, mean t* {:.2}",
            self.seed,
            s.num_built,
            100.0 * s.fraction_exceeded,
            s.mean_t_star
        );
        if !s.surrogates_farther {
            log::warn!("seed {}: surrogates are not farther from the ID classes than training data", self.seed);
        }
        self.surrogates.insert(key, set.clone());
        Ok(set)
    }

    pub fn rejection(&mut self, v: &Variant) -> Result<Rc<RejectionResult>> {
        if let Some(r) = self.rejections.get(v) {
            return Ok(r.clone());
        }
        let set = self.surrogates(&v.strategy, v.stop_offset)?;
        let rc = RejectionConfig { objective: v.objective, replace_masks: v.replace_masks, ..self.cfg.rejection.clone() };
        log::info!("seed {}: training rejection network {v:?}", self.seed);
        let out = train_rejection(self.classifier.clone(), &self.data.corpus, &set.surrogates, &self.cfg.rejection_train(self.seed), &rc)?;
        let stats = fit_from_encoder(&out.params, &self.data.corpus.train, self.cfg.shrinkage)?;
        let r = Rc::new(RejectionResult { params: out.params, stats, epochs: out.epochs, steps: out.steps });
        self.rejections.insert(v.clone(), r.clone());
        Ok(r)
    }

    fn report(&self, method: &str, ctx: &ScoringContext, spec: &RuleSpec, id: &ScoringInputs, ood: &ScoringInputs) -> Result<EvalReport> {
        let set = score_inputs(&RuleRegistry::with_builtins(), ctx, spec, id, ood)?;
        EvalReport::from_scores(method, &set, self.seed, &self.data.id_name, &self.data.ood_name)
    }

    /// Parameter-free rules on a network with its own Gaussian stats.
    pub fn evaluate_rules(&self, method: &str, params: &EncoderParams, stats: &GaussianStats, rules: &[String]) -> Result<Vec<EvalReport>> {
        let ctx = ScoringContext { params, stats: Some(stats), activations: None };
        let id = ScoringInputs::new(params, &self.data.corpus.test)?;
        let ood = ScoringInputs::new(params, &self.data.ood.test)?;
        rules.iter().map(|r| self.report(method, &ctx, &RuleSpec::named(r), &id, &ood)).collect()
    }

    /// The CE classifier under every configured rule, plus each tuned
    /// baseline at its best grid point. The second value holds every grid
    /// point's report.
    pub fn classifier_reports(&self) -> Result<(Vec<EvalReport>, Vec<EvalReport>)> {
        let mut reports = self.evaluate_rules("ce", &self.classifier, &self.stats, &self.cfg.rules)?;
        let ctx = ScoringContext { params: &self.classifier, stats: Some(&self.stats), activations: Some(&self.activations) };
        let id = ScoringInputs::new(&self.classifier, &self.data.corpus.test)?;
        let ood = ScoringInputs::new(&self.classifier, &self.data.ood.test)?;
        let mut grid_reports = Vec::new();
        for b in &self.cfg.tuned_baselines {
            let points = self.cfg.grid.points(b, self.cfg.base_rule)?;
            let (best, all) = grid_search(&points, &mut |p| self.report("ce", &ctx, p, &id, &ood))?;
            log::info!("seed {}: best {} = {} (AUROC {:.4})", self.seed, b, best.hyperparameters.label(), best.auroc);
            reports.push(best);
            grid_reports.extend(all);
        }
        Ok((reports, grid_reports))
    }

    pub fn variant_reports(&mut self, method: &str, v: &Variant) -> Result<Vec<EvalReport>> {
        let r = self.rejection(v)?;
        self.evaluate_rules(method, &r.params, &r.stats, &self.cfg.rules)
    }

    /// Mean Mahalanobis score of the OOD test set under the classifier.
    pub fn ood_mean_score(&self) -> Result<f64> {
        let scores = features(&self.classifier, &self.data.ood.test)?.iter().map(|f| self.stats.score(f)).collect::<Result<Vec<_>>>()?;
        Ok(mean_std(&scores).0)
    }
}

/// Mean Mahalanobis scores (classifier feature space) of training data,
/// surrogates and real OOD data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub seed: u64,
    pub strategy: String,
    pub mean_train: f64,
    pub mean_surrogate: f64,
    pub mean_ood: f64,
    pub fraction_exceeded: f64,
    pub mean_t_star: f64,
}

impl SandwichRow {
    pub fn is_between(&self) -> bool {
        self.mean_train > self.mean_surrogate && self.mean_surrogate > self.mean_ood
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub offset: usize,
    pub mean_t_star: f64,
    pub fraction_exceeded: f64,
    /// Mean classifier-space Mahalanobis score of the surrogates.
    pub mean_surrogate_score: f64,
    /// POE + Mahalanobis detection on the resulting rejection network.
    pub auroc: f64,
    pub fpr95: f64,
}

/// Surrogate sets and rejection networks for every `t*` offset.
pub fn sweep_tstar(run: &mut SeedRun, offsets: &[usize]) -> Result<Vec<SweepRow>> {
    let base = Variant::from_config(run.cfg);
    let maha = ["maha".to_string()];
    offsets
        .iter()
        .map(|&offset| {
            let v = Variant { stop_offset: offset, ..base.clone() };
            let set = run.surrogates(&v.strategy, offset)?;
            let r = run.rejection(&v)?;
            let rep = run.evaluate_rules("poe", &r.params, &r.stats, &maha)?.remove(0);
            Ok(SweepRow {
                seed: run.seed,
                offset,
                mean_t_star: set.summary.mean_t_star,
                fraction_exceeded: set.summary.fraction_exceeded,
                mean_surrogate_score: set.summary.mean_score_surrogate,
                auroc: rep.auroc,
                fpr95: rep.fpr95,
            })
        })
        .collect()
}

pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "### t* offset sweep (POE + Maha)\n\n| seed | offset | mean t* | surrogate score | AUROC (%) | FPR@95 (%) |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | +{} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.seed,
            r.offset,
            r.mean_t_star,
            r.mean_surrogate_score,
            100.0 * r.auroc,
            100.0 * r.fpr95
        );
    }
    s
}

/// Figure data: one line per offset with seed-averaged values.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut offsets: Vec<usize> = rows.iter().map(|r| r.offset).collect();
    offsets.sort_unstable();
    offsets.dedup();
    let mut s = String::from("offset\tmean_t_star\tsurrogate_score\tauroc_mean\tauroc_std\tfpr95_mean\n");
    for o in offsets {
        let at: Vec<&SweepRow> = rows.iter().filter(|r| r.offset == o).collect();
        let col = |f: &dyn Fn(&SweepRow) -> f64| mean_std(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (a, asd) = col(&|r| r.auroc);
        let _ =
            writeln!(s, "{o}\t{}\t{}\t{a}\t{asd}\t{}", col(&|r| r.mean_t_star).0, col(&|r| r.mean_surrogate_score).0, col(&|r| r.fpr95).0);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub reports: Vec<EvalReport>,
    pub grid_reports: Vec<EvalReport>,
    pub sandwich: Vec<SandwichRow>,
    pub sweep: Vec<SweepRow>,
    /// Per seed, the epoch-mean margin loss of the default rejection run.
    pub margin_curves: Vec<(u64, Vec<f64>)>,
}

/// Runs every seed: CE classifier with all rules and tuned baselines,
/// surrogate construction, the default rejection network, and (when
/// configured) the `t*` offset sweep.
pub fn run_experiment(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut res = ExperimentResult {
        name: cfg.name.clone(),
        reports: Vec::new(),
        grid_reports: Vec::new(),
        sandwich: Vec::new(),
        sweep: Vec::new(),
        margin_curves: Vec::new(),
    };
    let v = Variant::from_config(cfg);
    for &seed in &cfg.seeds {
        let mut run = SeedRun::new(cfg, data, seed)?;
        let (reports, grid) = run.classifier_reports()?;
        res.reports.extend(reports);
        res.grid_reports.extend(grid);
        res.reports.extend(run.variant_reports("poe", &v)?);
        let set = run.surrogates(&v.strategy, v.stop_offset)?;
        res.sandwich.push(SandwichRow {
            seed,
            strategy: v.strategy.clone(),
            mean_train: set.summary.mean_score_train,
            mean_surrogate: set.summary.mean_score_surrogate,
            mean_ood: run.ood_mean_score()?,
            fraction_exceeded: set.summary.fraction_exceeded,
            mean_t_star: set.summary.mean_t_star,
        });
        let r = run.rejection(&v)?;
        res.margin_curves.push((seed, r.epochs.iter().map(|e| e.components.get("l_margin").copied().unwrap_or(0.0)).collect()));
        if !cfg.sweep_offsets.is_empty() {
            res.sweep.extend(sweep_tstar(&mut run, &cfg.sweep_offsets)?);
        }
    }
    Ok(res)
}

impl ExperimentResult {
    /// Mean AUROC of `method+rule` over seeds.
    pub fn mean_auroc(&self, key: &str) -> Option<f64> {
        let xs: Vec<f64> = self.reports.iter().filter(|r| r.key() == key).map(|r| r.auroc).collect();
        (!xs.is_empty()).then(|| mean_std(&xs).0)
    }

    pub fn markdown(&self) -> String {
        let mut s = markdown_table(&format!("{}: OOD detection", self.name), &aggregate(&self.reports));
        s.push_str("\n### Surrogate scores (classifier feature space)\n\n| seed | strategy | train | surrogate | real OOD | exceeded | mean t* |\n|---|---|---|---|---|---|---|\n");
        for r in &self.sandwich {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                r.seed, r.strategy, r.mean_train, r.mean_surrogate, r.mean_ood, r.fraction_exceeded, r.mean_t_star
            );
        }
        if !self.sweep.is_empty() {
            s.push('\n');
            s.push_str(&sweep_markdown(&self.sweep));
        }
        if !self.margin_curves.is_empty() {
            s.push_str("\n### Margin loss per epoch (rejection network)\n\n| seed | epoch means |\n|---|---|\n");
            for (seed, curve) in &self.margin_curves {
                let cells: Vec<String> = curve.iter().map(|m| format!("{m:.4}")).collect();
                let _ = writeln!(s, "| {seed} | {} |", cells.join(", "));
            }
        }
        s
    }

    pub fn sweep_tsv(&self) -> String {
        sweep_tsv(&self.sweep)
    }

    /// Writes `reports.json`, `grid_reports.json`, `sandwich.json`,
    /// `margin_curves.json`, `summary.md`, `summary.csv` and
    /// `tstar_sweep.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_artifact(&dir.join("reports.json"), "eval_reports", &self.reports)?;
        write_artifact(&dir.join("grid_reports.json"), "eval_reports", &self.grid_reports)?;
        write_artifact(&dir.join("sandwich.json"), "sandwich_rows", &self.sandwich)?;
        write_artifact(&dir.join("margin_curves.json"), "margin_curves", &self.margin_curves)?;
        write_file(&dir.join("summary.md"), self.markdown().as_bytes())?;
        write_file(&dir.join("summary.csv"), csv_table(&aggregate(&self.reports)).as_bytes())?;
        if !self.sweep.is_empty() {
            write_file(&dir.join("tstar_sweep.tsv"), self.sweep_tsv().as_bytes())?;
        }
        Ok(())
    }
}

/// Reports for the three ablations: mask replacement on/off, training
/// objective, and masking strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub replacement: Vec<EvalReport>,
    pub objective: Vec<EvalReport>,
    pub strategy: Vec<EvalReport>,
}

pub fn ablate(cfg: &ExperimentConfig, data: &PreparedData, seeds: &[u64]) -> Result<AblationResult> {
    cfg.validate()?;
    let base = Variant::from_config(cfg);
    let mut res = AblationResult { replacement: Vec::new(), objective: Vec::new(), strategy: Vec::new() };
    for &seed in seeds {
        let mut run = SeedRun::new(cfg, data, seed)?;
        for on in [true, false] {
            let v = Variant { replace_masks: on, ..base.clone() };
            let name = format!("poe(replace={})", if on { "on" } else { "off" });
            res.replacement.extend(run.variant_reports(&name, &v)?);
        }
        for obj in Objective::ALL {
            let v = Variant { objective: obj, ..base.clone() };
            res.objective.extend(run.variant_reports(&format!("poe({obj})"), &v)?);
        }
        for strategy in ["attention", "random", "loo"] {
            let v = Variant { strategy: strategy.into(), ..base.clone() };
            res.strategy.extend(run.variant_reports(&format!("poe({strategy})"), &v)?);
        }
    }
    Ok(res)
}

impl AblationResult {
    pub fn tables(&self) -> Vec<(&'static str, String)> {
        vec![
            ("replacement", markdown_table("Mask replacement", &aggregate(&self.replacement))),
            ("objective", markdown_table("Training objective", &aggregate(&self.objective))),
            ("strategy", markdown_table("Masking strategy", &aggregate(&self.strategy))),
        ]
    }

    pub fn markdown(&self) -> String {
        self.tables().into_iter().map(|(_, t)| t).collect::<Vec<_>>().join("\n")
    }

    /// One markdown and one csv file per ablation plus the raw reports.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for ((name, md), reports) in self.tables().into_iter().zip([&self.replacement, &self.objective, &self.strategy]) {
            write_file(&dir.join(format!("ablation_{name}.md")), md.as_bytes())?;
            write_file(&dir.join(format!("ablation_{name}.csv")), csv_table(&aggregate(reports)).as_bytes())?;
        }
        write_artifact(&dir.join("ablation_reports.json"), "ablation_reports", self)?;
        Ok(())
    }
}
