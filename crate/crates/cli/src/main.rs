use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use e11_cli::config::{self, parse_offsets, parse_provider, Overrides};
use e11_cli::exit::config_err;
use e11_cli::{emit_report, run_stage, Failure, ReportKind, Stage};
use e11_core::embedder::ProviderKind;

#[derive(Clone, Debug)]
struct Offsets(Vec<u32>);

#[derive(Parser)]
#[command(name = "e11", version, about = "Score posts against questionnaire items, factor them, and analyse forums and users")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Forecast offsets: `N`, `A..B` (inclusive) or `A,B,C`.
    #[arg(long, global = true, value_parser = |s: &str| parse_offsets(s).map(Offsets))]
    months_before: Option<Offsets>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// stub, http or cache.
    #[arg(long, global = true, value_parser = parse_provider)]
    provider: Option<ProviderKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the corpus and build user timelines.
    Ingest,
    /// Score every post against every item.
    Score,
    #[command(subcommand)]
    Efa(EfaCommand),
    /// Per-group factor profiles and the configured group comparison.
    Profile,
    /// Cross-validated joining forecasts per months-before offset.
    Forecast,
    /// Smoothed composite trajectories around t0.
    Trend,
    /// Emit a plot-data CSV and its JSON sidecar.
    Report {
        #[arg(value_enum)]
        kind: ReportKind,
    },
}

#[derive(Subcommand)]
enum EfaCommand {
    /// Diagnostics, factor retention and the factor model.
    Fit,
    /// Factor scores for every scored post.
    Score,
}

fn run(cli: Cli) -> Result<String, Failure> {
    let path = cli.config.ok_or_else(|| config_err("--config is required"))?;
    let overrides = Overrides {
        seed: cli.seed,
        folds: cli.folds,
        months_before: cli.months_before.map(|o| o.0),
        provider: cli.provider,
    };
    let loaded = config::load(&path, &overrides)?;
    let stage = match cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Score => Stage::Score,
        Command::Efa(EfaCommand::Fit) => Stage::EfaFit,
        Command::Efa(EfaCommand::Score) => Stage::EfaScore,
        Command::Profile => Stage::Profile,
        Command::Forecast => Stage::Forecast,
        Command::Trend => Stage::Trend,
        Command::Report { kind } => return emit_report(kind, &loaded),
    };
    run_stage(stage, &loaded).map(|s| format!("{}: {s}", stage.name()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            eprintln!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.kind.code() as u8)
        }
    }
}
