use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mtirl::harness::{self, AggregateMode, Experiment, ExperimentConfig, SummaryRow};
use mtirl::irl::LearnedWeights;

/// Multi-task maximum causal entropy IRL experiments on gridworlds.
#[derive(Debug, Parser)]
#[command(name = "mtirl", version)]
struct Cli {
    /// Worker threads for fitting (0 = one per core).
    #[arg(long, short = 'j', global = true, default_value_t = 0)]
    jobs: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample and write the demonstration files the config needs.
    GenDemos(RunArgs),
    /// Fit every configured algorithm and write results.csv.
    Run(RunArgs),
    /// Fit multi-task IRL over `sweep_lambdas` and write sweep_lambda.csv.
    SweepLambda(RunArgs),
    /// Summarize result tables over seeds.
    Aggregate {
        /// Result CSV files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, short = 'm', default_value = "best_of_seeds")]
        mode: AggregateMode,
        /// Write the summary here instead of stdout.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Value of the greedy policy for learned weights.
    EvalPolicy {
        #[arg(long, short = 'c')]
        config: PathBuf,
        /// Learned weights (JSON) written by `run` or `sweep-lambda`.
        #[arg(long, short = 'w')]
        weights: PathBuf,
        /// Task to evaluate on; defaults to the weights' own task.
        #[arg(long, short = 't')]
        task: Option<String>,
    },
}

fn load(args: &RunArgs) -> Result<(Experiment, PathBuf)> {
    let config =
        ExperimentConfig::load(&args.config).with_context(|| format!("loading config {}", args.config.display()))?;
    let out = args.output.clone().unwrap_or_else(|| config.output_dir.clone());
    Ok((Experiment::new(config)?, out))
}

fn write_summary(rows: &[SummaryRow], output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => harness::write_csv(path, rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn report(out: &harness::RunOutput) {
    let failed = out.rows.iter().filter(|r| !r.is_ok()).count();
    println!(
        "wrote {} ({} rows, {failed} failed)",
        out.results.display(),
        out.rows.len()
    );
    println!("wrote {}", out.metadata.display());
    println!("wrote {}", out.timings.display());
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenDemos(args) => {
            let (exp, out) = load(&args)?;
            let paths = harness::gen_demos(&exp, &out)?;
            println!(
                "wrote {} demonstration files under {}",
                paths.len(),
                harness::demo_dir(&out).display()
            );
        }
        Command::Run(args) => {
            let (exp, out) = load(&args)?;
            report(&harness::run(&exp, &out)?);
        }
        Command::SweepLambda(args) => {
            let (exp, out) = load(&args)?;
            report(&harness::sweep_lambda(&exp, &out)?);
        }
        Command::Aggregate { files, mode, output } => {
            let rows = harness::aggregate_files(&files, mode)?;
            write_summary(&rows, output.as_deref())?;
        }
        Command::EvalPolicy { config, weights, task } => {
            let config =
                ExperimentConfig::load(&config).with_context(|| format!("loading config {}", config.display()))?;
            let exp = Experiment::new(config)?;
            let w = LearnedWeights::read(&weights).with_context(|| format!("reading weights {}", weights.display()))?;
            let eval = harness::eval_policy(&exp, &w, task.as_deref())?;
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &eval)?;
            writeln!(stdout)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    harness::with_threads(cli.jobs, || execute(cli.command))?
}
