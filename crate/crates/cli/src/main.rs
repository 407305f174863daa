use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use modelab::params::Checkpoint;
use modelab::runner::{
    run_with, Analysis, ExperimentConfig, ExperimentReport, RunOptions, Scenario,
};
use modelab::table::OutputFormat;

#[derive(Parser)]
#[command(
    name = "modelab",
    version,
    about = "Mode-connectivity experiments on small classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario named in the config file.
    Run(Common),
    /// Linear interpolation scan between the two endpoints.
    Scan(WithEndpoints),
    /// Train a Bezier control point and compare against the straight line.
    Curve(WithEndpoints),
    /// Train gated combinations of the endpoints for every division strategy.
    Gate(WithEndpoints),
    /// Forgetting/memorization trace along the straight line.
    Trace(Common),
    /// Distance between same-step checkpoints of the two training runs.
    Distance(Common),
    /// List the available scenarios.
    Scenarios,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Added to every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
}

#[derive(Args)]
struct WithEndpoints {
    #[command(flatten)]
    common: Common,
    /// Checkpoint of endpoint A; skips training when given with --b.
    #[arg(long, requires = "b")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&c.config)
        .with_context(|| format!("reading config {}", c.config.display()))?;
    if let Some(offset) = c.seed {
        config.shift_seeds(offset);
    }
    if let Some(out) = &c.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn load_params(path: &Path) -> Result<modelab::params::ParamVector> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .params)
}

fn execute(
    common: &Common,
    analysis: Option<Analysis>,
    a: Option<&Path>,
    b: Option<&Path>,
) -> Result<()> {
    let config = load_config(common)?;
    let endpoints = match (a, b) {
        (Some(a), Some(b)) => Some((load_params(a)?, load_params(b)?)),
        (None, None) => None,
        _ => bail!("--a and --b must be given together"),
    };
    let options = RunOptions {
        format: common.format.parse::<OutputFormat>()?,
        analysis,
        endpoints,
    };
    let report = run_with(&config, &options)?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{} finished: {} artifacts in {} (config {})",
        report.scenario,
        report.artifacts.len(),
        report.output_dir.display(),
        report.config_hash
    );
    for (key, value) in &report.summary {
        println!("  {key} = {value:.6}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => execute(c, None, None, None),
        Command::Scan(w) => execute(
            &w.common,
            Some(Analysis::Scan),
            w.a.as_deref(),
            w.b.as_deref(),
        ),
        Command::Curve(w) => execute(
            &w.common,
            Some(Analysis::Curve),
            w.a.as_deref(),
            w.b.as_deref(),
        ),
        Command::Gate(w) => execute(
            &w.common,
            Some(Analysis::Gate),
            w.a.as_deref(),
            w.b.as_deref(),
        ),
        Command::Trace(c) => execute(c, Some(Analysis::Trace), None, None),
        Command::Distance(c) => execute(c, Some(Analysis::Distance), None, None),
        Command::Scenarios => {
            for s in Scenario::ALL {
                println!("{s}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
