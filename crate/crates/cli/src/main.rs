use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use refeed_cli::commands::{self, EvalArgs};
use refeed_cli::config::{Overrides, RunConfig};
use refeed_core::bm25::Bm25Params;
use refeed_core::corpus::{DatasetKind, DEFAULT_CHUNK_SIZE};

#[derive(Parser)]
#[command(name = "refeed", version, about = "Retrieval-feedback answer refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a JSONL corpus and build its BM25 index.
    Index {
        /// JSONL file with one `{"id", "title", "text"}` document per line.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the passage store and index.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Print the top-k passages for a query.
    Retrieve {
        /// Directory written by `refeed index`.
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Run one pipeline mode over a dataset.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a traces file against its dataset.
    Eval {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "qa")]
        task: DatasetKind,
        /// Comma-separated recall cut-offs.
        #[arg(long, default_value = "1,5,10")]
        ks: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corpus directory; adds a question-only retrieval coverage arm.
        #[arg(long)]
        coverage_index: Option<PathBuf>,
    },
    /// Compare the full pipeline with its ablations and baselines.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load_config(path: &PathBuf, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Index { input, out: dir, chunk_size, k1, b } => {
            commands::index(&input, &dir, chunk_size, Bm25Params { k1, b }, &mut out)?;
        }
        Command::Retrieve { index, query, k } => {
            commands::retrieve(&index, &query, k, &mut out)?;
        }
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let summary = commands::run(&cfg, &mut out)?;
            if summary.traces == 0 && summary.examples > 0 {
                anyhow::bail!("every example failed; see {}", cfg.output_dir.join(commands::FAILURES_FILE).display());
            }
        }
        Command::Eval { traces, dataset, task, ks, out: report, coverage_index } => {
            let args = EvalArgs {
                traces,
                dataset,
                task,
                ks: commands::parse_ks(&ks)?,
                out: report,
                coverage_corpus: coverage_index,
            };
            commands::eval(&args, &mut out)?;
        }
        Command::Ablate { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            commands::ablate(&cfg, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
