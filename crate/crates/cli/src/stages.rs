use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use poe::artifact::{read_artifact, write_artifact, write_file, Checkpoint, PipelineManifest};
use poe::data::Vocabulary;
use poe::encoder::{features, init_encoder, train_classifier, EncoderParams};
use poe::eval::{aggregate, csv_table, grid_search, markdown_table, EvalReport};
use poe::experiment::{
    ablate, prepare_data, run_experiment, sweep_markdown, sweep_tstar, sweep_tsv, ExperimentConfig, PreparedData, SeedRun,
};
use poe::gaussian::{fit_from_encoder, GaussianStats};
use poe::poe::{construct_surrogate_set, read_surrogates_jsonl, write_surrogates_jsonl, MaskStrategy, StrategyRegistry};
use poe::rejection::{train_rejection, RejectionConfig};
use poe::scoring::{score_corpus, ActivationStats, RuleRegistry, RuleSpec, ScoreSet, ScoringContext};
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, Network};

const CORPUS: &str = "corpus";
const CLASSIFIER: &str = "classifier";
const CE_STATS: &str = "ce_stats";
const SURROGATES: &str = "surrogates";
const REJECTION: &str = "rejection";
const POE_STATS: &str = "poe_stats";
const REPORTS: &str = "reports";

/// Gaussian and activation statistics of one network.
#[derive(Serialize, Deserialize)]
struct FeatureStats {
    gaussian: GaussianStats,
    activations: ActivationStats,
}

fn fit_feature_stats(params: &EncoderParams, data: &PreparedData, shrinkage: f64) -> Result<FeatureStats> {
    Ok(FeatureStats {
        gaussian: fit_from_encoder(params, &data.corpus.train, shrinkage)?,
        activations: ActivationStats::fit(&features(params, &data.corpus.train)?, params.checksum())?,
    })
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Output directory, seed and manifest of a stage-by-stage pipeline.
struct Pipeline {
    cfg: ExperimentConfig,
    root: PathBuf,
    seed: u64,
    manifest: PipelineManifest,
}

impl Pipeline {
    fn open(cli: &Cli) -> Result<Self> {
        let cfg = load_config(cli)?;
        let seed = cli.seed.unwrap_or(cfg.seeds[0]);
        let root = cli.out.clone();
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let manifest = PipelineManifest::open(&root, &cfg.hash(), seed)?;
        Ok(Pipeline { cfg, root, seed, manifest })
    }

    fn require(&self, stage: &str) -> Result<PathBuf> {
        Ok(self.manifest.require(&self.root, stage)?)
    }

    fn data(&self) -> Result<PreparedData> {
        Ok(read_artifact(&self.require(CORPUS)?, "prepared_data")?)
    }

    fn checkpoint(&self, stage: &str, vocab: &Vocabulary) -> Result<EncoderParams> {
        let ck: Checkpoint = read_artifact(&self.require(stage)?, "checkpoint")?;
        ck.verify(vocab)?;
        Ok(ck.params)
    }

    fn stats(&self, stage: &str) -> Result<FeatureStats> {
        Ok(read_artifact(&self.require(stage)?, "feature_stats")?)
    }

    /// Writes an artifact, records it and saves the manifest.
    fn put<T: Serialize>(&mut self, stage: &str, file: &str, kind: &str, value: &T, inputs: &[&str]) -> Result<()> {
        write_artifact(&self.root.join(file), kind, value)?;
        self.record(stage, file, inputs)
    }

    fn record(&mut self, stage: &str, file: &str, inputs: &[&str]) -> Result<()> {
        let sha = self.manifest.record(&self.root, stage, Path::new(file), inputs)?;
        self.manifest.save(&self.root)?;
        println!("{}", serde_json::json!({ "stage": stage, "path": self.root.join(file), "sha256": sha }));
        Ok(())
    }

    fn network_stages(net: Network) -> (&'static str, &'static str) {
        match net {
            Network::Ce => (CLASSIFIER, CE_STATS),
            Network::Poe => (REJECTION, POE_STATS),
        }
    }

    /// Scores one network with one rule, reusing the cached score set when
    /// it was computed from the current network, statistics and corpus.
    fn score(&mut self, net: Network, spec: &RuleSpec, data: &PreparedData) -> Result<ScoreSet> {
        let (ck_stage, stats_stage) = Self::network_stages(net);
        let label = spec.label();
        let stage = format!("scores/{}/{label}", net.name());
        let file = format!("scores/{}/{}.json", net.name(), sanitize(&label));
        let inputs = [ck_stage, stats_stage, CORPUS];
        if self.manifest.is_fresh(&self.root, &stage, &inputs) {
            info!("reusing cached score set {stage}");
            return Ok(read_artifact(&self.root.join(&file), "score_set")?);
        }
        let params = self.checkpoint(ck_stage, &data.vocab)?;
        let stats = self.stats(stats_stage)?;
        let ctx = ScoringContext { params: &params, stats: Some(&stats.gaussian), activations: Some(&stats.activations) };
        info!("scoring {stage}");
        let mut set = score_corpus(&RuleRegistry::with_builtins(), &ctx, &data.corpus.test, &data.ood.test, spec)?;
        set.artifact_checksums.insert("stats".into(), self.manifest.stages[stats_stage].sha256.clone());
        write_artifact(&self.root.join(&file), "score_set", &set)?;
        self.manifest.record(&self.root, &stage, Path::new(&file), &inputs)?;
        self.manifest.save(&self.root)?;
        Ok(set)
    }

    fn report(&mut self, net: Network, spec: &RuleSpec, data: &PreparedData) -> Result<EvalReport> {
        let set = self.score(net, spec, data)?;
        Ok(EvalReport::from_scores(net.name(), &set, self.seed, &data.id_name, &data.ood_name)?)
    }
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn seeds(cli: &Cli, cfg: &ExperimentConfig) -> Vec<u64> {
    cli.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::PrepareData => {
            let mut p = Pipeline::open(cli)?;
            let data = prepare_data(&p.cfg)?;
            info!(
                "{} train / {} dev / {} test ID examples, {} OOD test examples, vocabulary {}",
                data.corpus.train.len(),
                data.corpus.dev.len(),
                data.corpus.test.len(),
                data.ood.test.len(),
                data.vocab.size()
            );
            p.put(CORPUS, "corpus.json", "prepared_data", &data, &[])
        }
        Command::TrainClassifier => {
            let mut p = Pipeline::open(cli)?;
            let data = p.data()?;
            let ecfg = p.cfg.encoder_config(data.vocab.size(), data.corpus.num_classes, p.seed);
            let out = train_classifier(init_encoder(ecfg)?, &data.corpus, &p.cfg.classifier_train(p.seed))?;
            if let Some(last) = out.epochs.last() {
                info!("final train acc {:.3}, dev acc {:?}", last.train_acc, last.dev_acc);
            }
            write_artifact(&p.root.join("classifier_log.json"), "epoch_log", &out.epochs)?;
            p.put(CLASSIFIER, "classifier.json", "checkpoint", &Checkpoint::new(out.params, &data.vocab), &[CORPUS])
        }
        Command::FitGaussian => {
            let mut p = Pipeline::open(cli)?;
            let data = p.data()?;
            let params = p.checkpoint(CLASSIFIER, &data.vocab)?;
            let stats = fit_feature_stats(&params, &data, p.cfg.shrinkage)?;
            info!("class thresholds {:?}", stats.gaussian.class_thresholds);
            p.put(CE_STATS, "ce_stats.json", "feature_stats", &stats, &[CLASSIFIER, CORPUS])
        }
        Command::ConstructOod { strategy } => {
            let mut p = Pipeline::open(cli)?;
            let data = p.data()?;
            let params = p.checkpoint(CLASSIFIER, &data.vocab)?;
            let stats = p.stats(CE_STATS)?;
            let kind = strategy.clone().unwrap_or_else(|| p.cfg.strategy.clone());
            let ranker = MaskStrategy::new(kind, p.seed).build(&StrategyRegistry::with_builtins())?;
            let set = construct_surrogate_set(&data.corpus.train, &params, &stats.gaussian, &*ranker, &p.cfg.construct)?;
            info!(
                "{} surrogates, {} skipped, {:.1}% exceeded the threshold, mean t* {:.2}",
                set.summary.num_built,
                set.summary.num_skipped,
                100.0 * set.summary.fraction_exceeded,
                set.summary.mean_t_star
            );
            write_surrogates_jsonl(&p.root.join("surrogates.jsonl"), &set.surrogates)?;
            write_artifact(&p.root.join("surrogate_summary.json"), "surrogate_summary", &set.summary)?;
            p.record(SURROGATES, "surrogates.jsonl", &[CLASSIFIER, CE_STATS, CORPUS])
        }
        Command::TrainRejection { objective } => {
            let mut p = Pipeline::open(cli)?;
            let data = p.data()?;
            let init = p.checkpoint(CLASSIFIER, &data.vocab)?;
            let surrogates = read_surrogates_jsonl(&p.require(SURROGATES)?)?;
            let rc = RejectionConfig { objective: objective.unwrap_or(p.cfg.rejection.objective), ..p.cfg.rejection.clone() };
            let out = train_rejection(init, &data.corpus, &surrogates, &p.cfg.rejection_train(p.seed), &rc)?;
            let log: String = out.steps.iter().map(|s| serde_json::to_string(s).map(|l| l + "\n")).collect::<Result<_, _>>()?;
            write_file(&p.root.join("rejection_log.jsonl"), log.as_bytes())?;
            write_artifact(&p.root.join("rejection_epochs.json"), "epoch_log", &out.epochs)?;
            let stats = fit_feature_stats(&out.params, &data, p.cfg.shrinkage)?;
            p.put(REJECTION, "rejection.json", "checkpoint", &Checkpoint::new(out.params, &data.vocab), &[CLASSIFIER, SURROGATES])?;
            p.put(POE_STATS, "poe_stats.json", "feature_stats", &stats, &[REJECTION, CORPUS])
        }
        Command::Score { rule, network, temperature, epsilon, percentile, sparsity, base } => {
            let mut p = Pipeline::open(cli)?;
            let data = p.data()?;
            let spec = RuleSpec {
                temperature: *temperature,
                epsilon: *epsilon,
                percentile: *percentile,
                sparsity: *sparsity,
                base: *base,
                ..RuleSpec::named(rule)
            };
            RuleRegistry::with_builtins().create(&spec)?;
            let r = p.report(*network, &spec, &data)?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(())
        }
        Command::Evaluate => {
            let mut p = Pipeline::open(cli)?;
            let data = p.data()?;
            for stage in [CLASSIFIER, CE_STATS, REJECTION, POE_STATS] {
                p.require(stage)?;
            }
            let mut reports = Vec::new();
            let rules = p.cfg.rules.clone();
            for net in [Network::Ce, Network::Poe] {
                for r in &rules {
                    reports.push(p.report(net, &RuleSpec::named(r), &data)?);
                }
            }
            for b in p.cfg.tuned_baselines.clone() {
                let points = p.cfg.grid.points(&b, p.cfg.base_rule)?;
                let (best, _) = grid_search(&points, &mut |spec| p.report(Network::Ce, spec, &data).map_err(to_core))?;
                reports.push(best);
            }
            let rows = aggregate(&reports);
            let md = markdown_table(&format!("{} (seed {})", p.cfg.name, p.seed), &rows);
            write_file(&p.root.join("summary.md"), md.as_bytes())?;
            write_file(&p.root.join("summary.csv"), csv_table(&rows).as_bytes())?;
            print!("{md}");
            p.put(REPORTS, "reports.json", "eval_reports", &reports, &[CLASSIFIER, REJECTION, CORPUS])
        }
        Command::Ablate => {
            let cfg = load_config(cli)?;
            let data = prepare_data(&cfg)?;
            let res = ablate(&cfg, &data, &seeds(cli, &cfg))?;
            let dir = cli.out.join("ablation");
            res.write(&dir)?;
            print!("{}", res.markdown());
            Ok(())
        }
        Command::SweepTstar => {
            let cfg = load_config(cli)?;
            let data = prepare_data(&cfg)?;
            let mut rows = Vec::new();
            for seed in seeds(cli, &cfg) {
                let mut run = SeedRun::new(&cfg, &data, seed)?;
                rows.extend(sweep_tstar(&mut run, &cfg.sweep_offsets)?);
            }
            let dir = cli.out.join("sweep");
            write_file(&dir.join("tstar_sweep.tsv"), sweep_tsv(&rows).as_bytes())?;
            write_artifact(&dir.join("tstar_sweep.json"), "sweep_rows", &rows)?;
            let md = sweep_markdown(&rows);
            write_file(&dir.join("tstar_sweep.md"), md.as_bytes())?;
            print!("{md}");
            Ok(())
        }
        Command::Experiment => {
            let mut cfg = load_config(cli)?;
            cfg.seeds = seeds(cli, &cfg);
            let data = prepare_data(&cfg)?;
            let res = run_experiment(&cfg, &data)?;
            res.write(&cli.out.join("experiment"))?;
            print!("{}", res.markdown());
            Ok(())
        }
    }
}

fn to_core(e: anyhow::Error) -> poe::Error {
    match e.downcast::<poe::Error>() {
        Ok(core) => core,
        Err(other) => poe::Error::Invalid(format!("{other:#}")),
    }
}
