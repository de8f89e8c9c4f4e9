use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dialforge", version = env!("DIALFORGE_VERSION"), about = "Synthesize, score and harden task-oriented dialogue data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (store, reports, manifests).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Directory of reference documents.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate candidate user personas.
    GenUsers {
        #[arg(long)]
        num: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate action sequences for every stored persona.
    SimulateActions {
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Produce dialogues from the stored action sequences.
    GenDialogues {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        dia_len: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Decode prompts from the best parameters of the latest evolve-metric run.
        #[arg(long)]
        evolved: bool,
    },
    /// Evolve the metric graph and tune prompt parameters.
    EvolveMetric {
        /// Cap on total gateway calls.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        offspring: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assess, classify and regenerate reasoning tasks.
    RefineDataset {
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Accept regenerated tasks without human review.
        #[arg(long)]
        auto_accept: bool,
    },
    /// Corpus statistics.
    Stats {
        /// Dialogue JSONL file; defaults to the store.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Pairwise embedding similarity of dialogues.
    ReportSimilarity {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Topic repetition across dialogues.
    ReportTopics {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Serve the verification queue and reports over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenUsers { .. } => "gen-users",
            Command::SimulateActions { .. } => "simulate-actions",
            Command::GenDialogues { .. } => "gen-dialogues",
            Command::EvolveMetric { .. } => "evolve-metric",
            Command::RefineDataset { .. } => "refine-dataset",
            Command::Stats { .. } => "stats",
            Command::ReportSimilarity { .. } => "report-similarity",
            Command::ReportTopics { .. } => "report-topics",
            Command::Serve { .. } => "serve",
        }
    }
}
