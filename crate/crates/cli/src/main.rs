//! `recur`: distant-recurrence phenotyping from notes and structured records.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recur_core::features::Variant;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "recur", version, about = "Distant recurrence phenotyping pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Feature variant, overriding the config.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Seed for the learner, the evaluation splits and the generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest, filter and segment notes; write the sentence store.
    Preprocess,
    /// Fit one variant on the whole cohort and write the model.
    Train,
    /// Repeated cross-validation, comparisons and held-out scoring.
    Evaluate,
    /// Generate a synthetic cohort with its oracle AUC.
    Synth,
    /// Descriptive cohort table and annotator agreement.
    Report,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        format!("{e} (expected one of {})", names.join(", "))
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.variant {
        cfg.variant.variant = v.to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.learner.seed = seed;
        cfg.eval.base_seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = Some(out);
    }
    match cli.command {
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Synth => commands::synth(&cfg, cli.seed),
        Command::Report => commands::report(&cfg),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("usage error");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
