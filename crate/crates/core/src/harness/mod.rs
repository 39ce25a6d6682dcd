//! Config-driven experiments: demonstration files, fit/evaluate sweeps,
//! result tables and their aggregation.
//!
//! Output layout under the output directory:
//!
//! ```text
//! demos/<task>_<source|target>_seed<seed>.txt
//! <name>.csv            one ResultRow per fit, plus oracle and expert rows
//! <name>.meta.json      software version, RNG, config hash, row count
//! <name>.timings.csv    wall-clock seconds per fit
//! weights/<name>/...    learned weights per successful fit
//! ```
//!
//! `<name>` is `results` for `run` and `sweep_lambda` for the λ sweep. Every
//! file except the timings is a pure function of the config.

pub mod aggregate;
pub mod config;
pub mod experiment;
pub mod results;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, mean_ci95, AggregateMode, SummaryRow};
pub use config::{Algorithm, ExperimentConfig, FamilyConfig, MetaConfig, TaskConfig};
pub use experiment::{derive_seed, DemoBank, Experiment, Job, JobOutcome, Role, TaskSetup};
pub use results::{read_csv, read_metadata, write_csv, ResultRow, RunMetadata, TimingRow};

use crate::demos::RNG_ID;
use crate::error::{Error, Result};
use crate::irl::LearnedWeights;

pub const SOFTWARE: &str = concat!("mtirl ", env!("CARGO_PKG_VERSION"));

/// Runs `f` on a pool of `threads` workers (`0` = one per core).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn demo_dir(out: &Path) -> PathBuf {
    out.join("demos")
}

/// Samples and writes every demonstration file the configured algorithms
/// need. Returns the written paths in a stable order.
pub fn gen_demos(exp: &Experiment, out: &Path) -> Result<Vec<PathBuf>> {
    let mut algorithms = exp.config.algorithms.clone();
    algorithms.push(Algorithm::Multitask);
    let keys = exp.needed_demos(&algorithms)?;
    let bank = DemoBank::generate(exp, &keys)?;
    let dir = demo_dir(out);
    create_dir(&dir)?;
    let mut paths = Vec::with_capacity(keys.len());
    for &(task, role, seed) in &keys {
        let path = Experiment::demo_path(&dir, &exp.tasks[task].label, role, seed);
        bank.get(task, role, seed)?.write(&path)?;
        log::info!("wrote {}", path.display());
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub results: PathBuf,
    pub metadata: PathBuf,
    pub timings: PathBuf,
}

/// Fits every `(target, seed, algorithm, M, λ)` cell of the config on the
/// demonstration files under `out` and writes `results.csv` and friends.
pub fn run(exp: &Experiment, out: &Path) -> Result<RunOutput> {
    run_named(exp, out, "run", "results", &exp.config.algorithms, &exp.config.lambdas)
}

/// Multi-task fits over `sweep_lambdas`, written to `sweep_lambda.csv`.
pub fn sweep_lambda(exp: &Experiment, out: &Path) -> Result<RunOutput> {
    run_named(
        exp,
        out,
        "sweep-lambda",
        "sweep_lambda",
        &[Algorithm::Multitask],
        &exp.config.sweep_lambdas,
    )
}

/// Runs jobs on in-memory demonstrations; no files are touched.
pub fn run_in_memory(exp: &Experiment, algorithms: &[Algorithm], lambdas: &[f64]) -> Result<Vec<JobOutcome>> {
    let bank = DemoBank::generate(exp, &exp.needed_demos(algorithms)?)?;
    exp.run_jobs(&bank, &exp.jobs(algorithms, lambdas)?)
}

fn run_named(
    exp: &Experiment,
    out: &Path,
    command: &str,
    name: &str,
    algorithms: &[Algorithm],
    lambdas: &[f64],
) -> Result<RunOutput> {
    let bank = DemoBank::load(exp, &demo_dir(out), &exp.needed_demos(algorithms)?)?;
    let jobs = exp.jobs(algorithms, lambdas)?;
    log::info!("{command}: {} fits", jobs.len());
    let outcomes = exp.run_jobs(&bank, &jobs)?;

    let mut rows = exp.reference_rows()?;
    rows.extend(outcomes.iter().map(|o| o.row.clone()));
    let timings: Vec<TimingRow> = outcomes
        .iter()
        .map(|o| TimingRow {
            algorithm: o.row.algorithm.clone(),
            target: o.row.target.clone(),
            m: o.row.m,
            lambda: o.row.lambda,
            seed: o.row.seed,
            seconds: o.seconds,
        })
        .collect();

    create_dir(out)?;
    let weights_dir = out.join("weights").join(name);
    create_dir(&weights_dir)?;
    for o in &outcomes {
        if let Some(w) = &o.weights {
            w.write(&weights_dir.join(weights_file_name(w, o.row.m.unwrap_or(0))))?;
        }
    }
    let results = out.join(format!("{name}.csv"));
    let metadata = out.join(format!("{name}.meta.json"));
    let timings_path = out.join(format!("{name}.timings.csv"));
    write_csv(&results, &rows)?;
    results::write_metadata(
        &metadata,
        &RunMetadata {
            software: SOFTWARE.into(),
            command: command.into(),
            rng: RNG_ID.into(),
            config_sha256: exp.config_hash()?,
            rows: rows.len(),
        },
    )?;
    write_csv(&timings_path, &timings)?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} fits failed; see the status column", jobs.len());
    }
    Ok(RunOutput {
        rows,
        results,
        metadata,
        timings: timings_path,
    })
}

pub fn weights_file_name(w: &LearnedWeights, m: usize) -> String {
    match w.lambda {
        Some(l) => format!("{}_{}_M{m}_lambda{l}_seed{}.json", w.algorithm, w.task_label, w.seed),
        None => format!("{}_{}_M{m}_seed{}.json", w.algorithm, w.task_label, w.seed),
    }
}

/// Reads and aggregates result tables.
pub fn aggregate_files(paths: &[PathBuf], mode: AggregateMode) -> Result<Vec<SummaryRow>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregate needs at least one result file".into(),
        ));
    }
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_csv::<ResultRow>(p)?);
    }
    aggregate(&rows, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub task: String,
    pub value: f64,
    pub oracle: f64,
    pub expert: f64,
}

/// Value of the greedy policy for learned weights on a configured task
/// (the weights' own task unless `task` is given).
pub fn eval_policy(exp: &Experiment, weights: &LearnedWeights, task: Option<&str>) -> Result<PolicyEvaluation> {
    if weights.feature_kind != exp.config.features.to_string() {
        return Err(Error::Config(format!(
            "weights use {} features but the config uses {}",
            weights.feature_kind, exp.config.features
        )));
    }
    let label = task.unwrap_or(&weights.task_label);
    let i = exp.task_index(label)?;
    let theta = weights.theta();
    if theta.len() != exp.features.dim() {
        return Err(Error::Shape(format!(
            "weights have length {}, the grid's features have dimension {}",
            theta.len(),
            exp.features.dim()
        )));
    }
    let t = &exp.tasks[i];
    Ok(PolicyEvaluation {
        task: label.to_string(),
        value: exp.greedy_value(i, &theta)?,
        oracle: t.oracle_value,
        expert: t.expert_value,
    })
}
