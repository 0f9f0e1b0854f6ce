mod config;
mod data;
mod eval;
mod jsonl;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracebox_core::chat::CassetteMode;
use tracebox_core::parser::run_conformance;
use tracebox_core::pipeline::Rounding;
use tracing_subscriber::EnvFilter;

use crate::config::CliConfig;

#[derive(Parser)]
#[command(
    name = "tracebox",
    version,
    about = "Box-grounded rewards, evaluation and data construction"
)]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Response parser utilities.
    #[command(subcommand)]
    Parser(ParserCmd),
    /// Training-data construction.
    #[command(subcommand)]
    Data(DataCmd),
    /// Run the reward HTTP service.
    Serve {
        /// Overrides `service.bind` from the config.
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Query a model on every benchmark question and write records and reports.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prompt template file; the bundled template when absent.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, default_value = "off")]
        cassette_mode: CassetteMode,
        #[arg(long)]
        cassette: Option<PathBuf>,
    },
    /// Rebuild the reports from saved records.
    Report {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory holding records.jsonl (and run.json); reports go here too.
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop samples that every reference model answered correctly.
    FilterConsensus {
        #[arg(long = "in")]
        input: PathBuf,
        /// One records.jsonl per reference model.
        #[arg(long = "records", required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ParserCmd {
    /// Check the parser against a labelled corpus.
    Conformance {
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Convert normalized-coordinate reasoning records to absolute pixels.
    Denormalize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "none", value_parser = parse_rounding)]
        rounding: Rounding,
    },
    /// Keep trajectories with at least two boxes.
    FilterMultibox {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a decoy box and reflection marker to a seeded subset.
    InjectReflection {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of records to modify; the rest pass through unchanged.
        #[arg(long)]
        fraction: Option<f64>,
        /// Only write the modified records.
        #[arg(long)]
        only_modified: bool,
        #[arg(long)]
        iou_ceiling: Option<f64>,
    },
    /// Keep samples a reference model got wrong on every attempt.
    FilterHard {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "records", required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Attempts required per sample.
        #[arg(long, default_value_t = 1)]
        attempts: usize,
    },
    /// Build counting questions from object annotations.
    MakeCounting {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_rounding(s: &str) -> Result<Rounding, String> {
    match s {
        "none" => Ok(Rounding::None),
        "nearest" => Ok(Rounding::Nearest),
        other => Err(format!("unknown rounding {other:?} (none, nearest)")),
    }
}

fn init_logging(json: bool) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr);
    if json {
        builder.json().flatten_event(true).init();
    } else {
        builder.compact().init();
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    init_logging(matches!(cli.command, Command::Serve { .. }));
    let cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    match cli.command {
        Command::Eval(EvalCmd::Run {
            dataset,
            out,
            prompt,
            cassette_mode,
            cassette,
        }) => {
            let endpoint = cfg
                .model
                .clone()
                .context("eval run needs a [model] section in --config")?;
            let summary = eval::run(eval::RunArgs {
                dataset: &dataset,
                out: &out,
                prompt: prompt.as_deref(),
                endpoint,
                cassette_mode,
                cassette: cassette.as_deref(),
                seed: cli.seed,
                settings: &cfg.eval,
            })
            .await?;
            println!("{summary}");
        }
        Command::Eval(EvalCmd::Report { dataset, out }) => {
            println!("{}", eval::report(&dataset, &out)?);
        }
        Command::Eval(EvalCmd::FilterConsensus { input, records, out }) => {
            let n = eval::filter_consensus(&input, &records, &out)?;
            println!("kept {n} sample(s)");
        }
        Command::Parser(ParserCmd::Conformance { corpus }) => {
            let file = std::fs::File::open(&corpus).with_context(|| corpus.display().to_string())?;
            let report = run_conformance(std::io::BufReader::new(file))?;
            for (line, msg) in &report.failures {
                println!("FAIL line {line}: {msg}");
            }
            println!("{}/{} cases passed", report.passed, report.total());
            if !report.is_clean() {
                bail!("{} conformance failure(s)", report.failures.len());
            }
        }
        Command::Data(cmd) => {
            let msg = match cmd {
                DataCmd::Denormalize { input, out, rounding } => data::denormalize(&input, &out, rounding)?,
                DataCmd::FilterMultibox { input, out } => data::filter_multibox(&input, &out)?,
                DataCmd::InjectReflection {
                    input,
                    out,
                    fraction,
                    only_modified,
                    iou_ceiling,
                } => data::inject_reflection(&input, &out, cli.seed, fraction, only_modified, iou_ceiling)?,
                DataCmd::FilterHard {
                    input,
                    records,
                    out,
                    attempts,
                } => data::filter_hard(&input, &records, &out, attempts)?,
                DataCmd::MakeCounting { input, out } => data::make_counting(&input, &out, cli.seed)?,
            };
            println!("{msg}");
        }
        Command::Serve { bind } => {
            let mut service = cfg.service.clone();
            if let Some(b) = bind {
                service.bind = b;
            }
            let state = tracebox_service::AppState::from_config(&service)?;
            let listener = tokio::net::TcpListener::bind(&service.bind)
                .await
                .with_context(|| format!("binding {}", service.bind))?;
            tracing::info!(addr = %listener.local_addr()?, reward_spec_hash = state.spec_hash(), "serving");
            tracebox_service::serve(listener, std::sync::Arc::new(state)).await?;
        }
    }
    Ok(())
}
