//! `poe`: stage-by-stage driver for pseudo outlier exposure experiments.
//!
//! Stage commands share one output directory whose `manifest.json` records
//! every artifact's checksum and the checksums it was built from; a stage
//! refuses to run when any upstream file changed.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use poe::rejection::Objective;
use poe::scoring::BaseRule;

#[derive(Parser, Debug)]
#[command(name = "poe", version, about = "Pseudo outlier exposure for text OOD detection")]
pub struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "POE_OUT", default_value = "poe-out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Network {
    /// The cross-entropy classifier.
    Ce,
    /// The rejection network.
    Poe,
}

impl Network {
    pub fn name(self) -> &'static str {
        match self {
            Network::Ce => "ce",
            Network::Poe => "poe",
        }
    }
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: poe::Error| e.to_string())
}

fn parse_base(s: &str) -> Result<BaseRule, String> {
    match s {
        "msp" => Ok(BaseRule::Msp),
        "energy" => Ok(BaseRule::Energy),
        other => Err(format!("unknown base rule `{other}` (msp or energy)")),
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build or load the corpora, the vocabulary and the tokenized splits.
    PrepareData,
    /// Train the cross-entropy classifier.
    TrainClassifier,
    /// Fit class-conditional Gaussians and activation statistics.
    FitGaussian,
    /// Build the surrogate OOD set by progressive masking.
    ConstructOod {
        /// attention, random or loo
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Train the rejection network on ID plus surrogate batches.
    TrainRejection {
        /// ce, ce_kl or ce_mcl
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
    },
    /// Score the ID and OOD test sets with one rule.
    Score {
        /// msp, energy, maha, odin, react or dice
        #[arg(long)]
        rule: String,
        #[arg(long, value_enum, default_value = "poe")]
        network: Network,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        sparsity: Option<f64>,
        /// Base rule for react/dice: msp or energy.
        #[arg(long, value_parser = parse_base)]
        base: Option<BaseRule>,
    },
    /// Score both networks with every configured rule and write report tables.
    Evaluate,
    /// Mask replacement, objective and masking-strategy ablations.
    Ablate,
    /// Sweep the number of extra masked tokens past the stopping step.
    SweepTstar,
    /// Run the whole configured experiment over all seeds.
    Experiment,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": one_line(first) }));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match stages::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<poe::Error>().map_or("error", poe::Error::kind);
            eprintln!("{}", serde_json::json!({ "error": kind, "message": one_line(&format!("{e:#}")) }));
            ExitCode::FAILURE
        }
    }
}
