mod config;
mod error;
mod fixture;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use config::{Overrides, PipelineConfig};
use error::CliError;

/// Specialize a dense retriever to a corpus from precomputed embeddings
/// and teacher scores.
#[derive(Parser)]
#[command(name = "distill", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixed reduction order everywhere (recorded in manifests).
    #[arg(long, global = true)]
    deterministic: bool,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Remove passages whose normalized text is contained in another.
    Dedup,
    /// Drop generated queries the retriever or the teacher disagree with.
    FilterQueries,
    /// Mine teacher-filtered hard negatives for the kept queries.
    Mine,
    /// Percentile-clipped min-max normalization of raw teacher scores.
    NormalizeScores,
    /// Train the embedding adapter on mined groups.
    Train,
    /// Map passage and held-out query embeddings through the adapter.
    Apply,
    /// Write base and adapted run files for the held-out queries.
    Retrieve,
    /// Score run files against the qrels.
    Evaluate {
        /// Run files to score instead of the retrieve outputs.
        #[arg(long)]
        run: Vec<PathBuf>,
    },
    /// Rerank a run with teacher scores and score both.
    RerankEval {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Re-mine, train and evaluate once per negative threshold.
    SweepThreshold {
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// dedup through evaluate in one go.
    Pipeline,
    /// Write the synthetic task and a config for it.
    Synthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        task_seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    let flags = Overrides { seed: cli.seed, deterministic: cli.deterministic, log_level: cli.log_level };
    let cfg = PipelineConfig::load(cli.config.as_deref(), |k| std::env::var(k).ok(), &flags)?;
    let filter = EnvFilter::try_new(&cfg.log_level)
        .map_err(|e| CliError::Usage(format!("bad log level `{}`: {e}", cfg.log_level)))?;
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match cli.command {
        Command::Dedup => stages::dedup(&cfg),
        Command::FilterQueries => stages::filter(&cfg),
        Command::Mine => stages::mine(&cfg),
        Command::NormalizeScores => stages::normalize(&cfg),
        Command::Train => stages::train_stage(&cfg),
        Command::Apply => stages::apply(&cfg),
        Command::Retrieve => stages::retrieve(&cfg),
        Command::Evaluate { run } => stages::evaluate(&cfg, &run),
        Command::RerankEval { run, depth } => stages::rerank_eval(&cfg, run.as_deref(), depth),
        Command::SweepThreshold { thresholds } => stages::sweep(&cfg, thresholds.as_deref()),
        Command::Pipeline => stages::pipeline(&cfg),
        Command::Synthetic { out, task_seed } => fixture::write_synthetic(&out, task_seed, cfg.settings.eval.depth),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
