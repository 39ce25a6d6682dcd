//! Experiment setup, demonstration generation and the fit/evaluate jobs.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;

use super::config::{Algorithm, ExperimentConfig};
use super::results::{ResultRow, STATUS_FAILED, STATUS_OK};
use crate::demos::{sample_trajectories, DemoSet};
use crate::error::{Error, Result};
use crate::gridworld::{build_mdp, feature_map, parse_grid, GridSpec, TaskRewardSpec};
use crate::irl::{fit_joint_baseline, fit_multitask, fit_single, fit_task, FitOptions, IrlTask, LearnedWeights};
use crate::mdp::{greedy_policy, policy_value, value_iteration, FeatureMap, Policy, TabularMdp};
use crate::meta::{reptile_meta, MetaOptions, MetaState};
use crate::soft::soft_value_iteration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// `source_demos` trajectories, used when the task is not the target.
    Source,
    /// The largest `target_demos` count; each run uses a prefix.
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Target => "target",
        })
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable per-purpose seed derived from a base seed and string tags.
pub fn derive_seed(base: u64, tags: &[&str]) -> u64 {
    let mut h = mix(base);
    for tag in tags {
        for b in tag.bytes() {
            h = mix(h ^ u64::from(b));
        }
        h = mix(h ^ 0xff);
    }
    h
}

/// One task of the experiment: its true-reward MDP, the soft-optimal expert
/// that generates its demonstrations, and reference values.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub label: String,
    pub spec: TaskRewardSpec,
    pub mdp: TabularMdp,
    pub expert: Policy,
    /// Discounted value of an optimal policy.
    pub oracle_value: f64,
    /// Discounted value of the soft-optimal expert.
    pub expert_value: f64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub grid_text: String,
    pub grid: GridSpec,
    pub features: FeatureMap,
    pub tasks: Vec<TaskSetup>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let grid_text = config.grid_text()?;
        let grid = parse_grid(&grid_text)?.with_p_intended(config.p_intended);
        grid.validate()?;
        let features = feature_map(&grid, config.features);
        let planner = config.fit.planner;
        let tasks = config
            .task_configs()
            .into_par_iter()
            .map(|t| {
                let spec = t.spec();
                let (mdp, _) = build_mdp(&grid, &spec, config.discount)?;
                let reward = mdp.require_reward()?.clone();
                let expert = soft_value_iteration(&mdp, &reward, &planner)?.pi;
                let optimal = value_iteration(&mdp, &reward, planner.tol, planner.max_iter)?;
                let oracle = greedy_policy(&optimal.q).to_stochastic(mdp.n_actions());
                Ok(TaskSetup {
                    oracle_value: policy_value(&mdp, &reward, &oracle)?,
                    expert_value: policy_value(&mdp, &reward, &expert)?,
                    label: t.label,
                    spec,
                    mdp,
                    expert,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Experiment {
            config,
            grid_text,
            grid,
            features,
            tasks,
        })
    }

    pub fn task_index(&self, label: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.label == label)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {label:?}")))
    }

    pub fn target_indices(&self) -> Result<Vec<usize>> {
        self.config.target_labels().iter().map(|l| self.task_index(l)).collect()
    }

    /// SHA-256 over the resolved config and the grid text, as lowercase hex.
    pub fn config_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config)?.as_bytes());
        h.update(b"\0");
        h.update(self.grid_text.as_bytes());
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn demo_seed(&self, task: usize, role: Role, seed: u64) -> u64 {
        derive_seed(seed, &["demos", &self.tasks[task].label, &role.to_string()])
    }

    pub fn demo_count(&self, role: Role) -> usize {
        match role {
            Role::Source => self.config.source_demos,
            Role::Target => self.config.max_target_demos(),
        }
    }

    pub fn generate_demos(&self, task: usize, role: Role, seed: u64) -> Result<DemoSet> {
        let t = &self.tasks[task];
        sample_trajectories(
            &t.mdp,
            &t.expert,
            &t.label,
            self.config.horizon,
            self.demo_count(role),
            self.demo_seed(task, role, seed),
        )
    }

    pub fn demo_path(dir: &Path, label: &str, role: Role, seed: u64) -> PathBuf {
        dir.join(format!("{label}_{role}_seed{seed}.txt"))
    }

    /// Every `(task, role, seed)` the configured runs need: target files for
    /// the targets and source files for the tasks that serve as sources.
    pub fn needed_demos(&self, algorithms: &[Algorithm]) -> Result<Vec<(usize, Role, u64)>> {
        let targets = self.target_indices()?;
        let sources = algorithms.iter().any(|a| a.needs_sources());
        let mut keys = Vec::new();
        for &seed in &self.config.seeds {
            for task in 0..self.tasks.len() {
                if targets.contains(&task) {
                    keys.push((task, Role::Target, seed));
                }
                if sources && targets.iter().any(|&t| t != task) {
                    keys.push((task, Role::Source, seed));
                }
            }
        }
        Ok(keys)
    }

    /// The value, under task `task`'s true reward, of the greedy policy for
    /// the reward `θ·φ`.
    pub fn greedy_value(&self, task: usize, theta: &Array1<f64>) -> Result<f64> {
        let t = &self.tasks[task];
        let planner = self.config.fit.planner;
        let reward = self.features.reward(theta)?;
        let sol = value_iteration(&t.mdp, &reward, planner.tol, planner.max_iter)?;
        let pi = greedy_policy(&sol.q).to_stochastic(t.mdp.n_actions());
        policy_value(&t.mdp, t.mdp.require_reward()?, &pi)
    }

    /// Oracle and expert rows for every target.
    pub fn reference_rows(&self) -> Result<Vec<ResultRow>> {
        Ok(self
            .target_indices()?
            .into_iter()
            .flat_map(|i| {
                let t = &self.tasks[i];
                [("oracle", t.oracle_value), ("expert", t.expert_value)].map(|(name, value)| ResultRow {
                    algorithm: name.into(),
                    target: t.label.clone(),
                    m: None,
                    lambda: None,
                    seed: None,
                    value: Some(value),
                    oracle: t.oracle_value,
                    expert: t.expert_value,
                    iterations: None,
                    converged: None,
                    status: STATUS_OK.into(),
                    message: String::new(),
                })
            })
            .collect())
    }

    /// Jobs in output order: target, seed, algorithm, `M`, `λ`.
    pub fn jobs(&self, algorithms: &[Algorithm], lambdas: &[f64]) -> Result<Vec<Job>> {
        let mut jobs = Vec::new();
        for target in self.target_indices()? {
            for &seed in &self.config.seeds {
                for &algorithm in algorithms {
                    for &m in &self.config.target_demos {
                        if algorithm == Algorithm::Multitask {
                            for &lambda in lambdas {
                                jobs.push(Job {
                                    algorithm,
                                    target,
                                    m,
                                    lambda: Some(lambda),
                                    seed,
                                });
                            }
                        } else {
                            jobs.push(Job {
                                algorithm,
                                target,
                                m,
                                lambda: None,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        Ok(jobs)
    }

    /// Runs `jobs` in parallel; results come back in job order and do not
    /// depend on the number of threads.
    pub fn run_jobs(&self, bank: &DemoBank, jobs: &[Job]) -> Result<Vec<JobOutcome>> {
        let mut meta_keys: Vec<(usize, u64)> = jobs
            .iter()
            .filter(|j| j.algorithm == Algorithm::Meta)
            .map(|j| (j.target, j.seed))
            .collect();
        meta_keys.sort_unstable();
        meta_keys.dedup();
        let metas: HashMap<(usize, u64), Result<MetaState, String>> = meta_keys
            .par_iter()
            .map(|&(target, seed)| {
                let state = self.meta_train(bank, target, seed).map_err(|e| e.to_string());
                ((target, seed), state)
            })
            .collect();
        jobs.par_iter()
            .map(|job| {
                let start = Instant::now();
                let fitted = match job.algorithm {
                    Algorithm::Meta => match &metas[&(job.target, job.seed)] {
                        Ok(state) => self.finetune(bank, job, &state.phi()),
                        Err(msg) => Err(Error::InvalidArgument(format!("meta-training failed: {msg}"))),
                    },
                    _ => self.fit(bank, job),
                };
                let t = &self.tasks[job.target];
                let mut row = ResultRow {
                    algorithm: job.algorithm.to_string(),
                    target: t.label.clone(),
                    m: Some(job.m),
                    lambda: job.lambda,
                    seed: Some(job.seed),
                    value: None,
                    oracle: t.oracle_value,
                    expert: t.expert_value,
                    iterations: None,
                    converged: None,
                    status: STATUS_OK.into(),
                    message: String::new(),
                };
                let evaluated = fitted.and_then(|fit| Ok((self.greedy_value(job.target, &fit.theta)?, fit)));
                let weights = match evaluated {
                    Ok((value, fit)) => {
                        row.value = Some(value);
                        row.iterations = Some(fit.iterations);
                        row.converged = Some(fit.converged);
                        Some(LearnedWeights {
                            task_label: t.label.clone(),
                            algorithm: job.algorithm.to_string(),
                            feature_kind: self.config.features.to_string(),
                            lambda: job.lambda,
                            seed: job.seed,
                            theta: fit.theta.to_vec(),
                            iterations: fit.iterations,
                            converged: fit.converged,
                            final_grad_norm: fit.final_grad_norm,
                        })
                    }
                    Err(e) => {
                        log::warn!("{job}: {e}");
                        row.status = STATUS_FAILED.into();
                        row.message = e.to_string();
                        None
                    }
                };
                Ok(JobOutcome {
                    row,
                    weights,
                    seconds: start.elapsed().as_secs_f64(),
                })
            })
            .collect()
    }

    fn target_task<'a>(&'a self, bank: &'a DemoBank, job: &Job) -> Result<(DemoSet, IrlTask<'a>)> {
        let demos = bank.get(job.target, Role::Target, job.seed)?.truncated(job.m);
        let task = IrlTask::from_demos(&self.tasks[job.target].mdp, &self.features, &demos)?;
        Ok((demos, task))
    }

    fn source_tasks<'a>(&'a self, bank: &'a DemoBank, target: usize, seed: u64) -> Result<Vec<IrlTask<'a>>> {
        (0..self.tasks.len())
            .filter(|&i| i != target)
            .map(|i| IrlTask::from_demos(&self.tasks[i].mdp, &self.features, bank.get(i, Role::Source, seed)?))
            .collect()
    }

    fn fit(&self, bank: &DemoBank, job: &Job) -> Result<Fit> {
        let opts = &self.config.fit;
        let target_mdp = &self.tasks[job.target].mdp;
        let (demos, target) = self.target_task(bank, job)?;
        match job.algorithm {
            Algorithm::Single => {
                let (theta, report) = fit_single(target_mdp, &self.features, &demos, opts)?;
                Ok(Fit::new(
                    theta,
                    report.iterations,
                    report.converged,
                    report.final_grad_norms[0],
                ))
            }
            Algorithm::Joint => {
                let mut sets: Vec<&DemoSet> = (0..self.tasks.len())
                    .filter(|&i| i != job.target)
                    .map(|i| bank.get(i, Role::Source, job.seed))
                    .collect::<Result<_>>()?;
                sets.push(&demos);
                let (theta, report) = fit_joint_baseline(target_mdp, &self.features, &sets, opts)?;
                Ok(Fit::new(
                    theta,
                    report.iterations,
                    report.converged,
                    report.final_grad_norms[0],
                ))
            }
            Algorithm::Multitask => {
                let mut tasks = self.source_tasks(bank, job.target, job.seed)?;
                tasks.push(target);
                let lambda = job.lambda.expect("multitask jobs carry a lambda");
                let (params, report) = fit_multitask(&tasks, lambda, opts)?;
                let last = tasks.len() - 1;
                Ok(Fit::new(
                    params.thetas[last].clone(),
                    report.iterations,
                    report.converged,
                    report.final_grad_norms[last],
                ))
            }
            Algorithm::FinetuneZero => self.finetune(bank, job, &Array1::zeros(self.features.dim())),
            Algorithm::Meta => unreachable!("meta jobs finetune a shared initialization"),
        }
    }

    fn finetune(&self, bank: &DemoBank, job: &Job, init: &Array1<f64>) -> Result<Fit> {
        let (_, target) = self.target_task(bank, job)?;
        let m = &self.config.meta;
        // Same schedule as `finetune_task`, keeping the report.
        let opts = FitOptions {
            lr: m.finetune_lr,
            max_iter: m.finetune_steps,
            grad_tol: 0.0,
            step_halving: false,
            ..self.config.fit
        };
        let (theta, report) = fit_task(&target, init.clone(), &opts)?;
        Ok(Fit::new(
            theta,
            report.iterations,
            report.converged,
            report.final_grad_norms[0],
        ))
    }

    pub fn meta_options(&self, target: usize, seed: u64) -> MetaOptions {
        let m = &self.config.meta;
        MetaOptions {
            inner_lr: m.inner_lr,
            inner_steps: m.inner_steps,
            outer_lr: m.outer_lr,
            outer_iters: m.outer_iters,
            seed: derive_seed(seed, &["meta", &self.tasks[target].label]),
            planner: self.config.fit.planner,
        }
    }

    /// Reptile over every task except `target`, from zero weights.
    pub fn meta_train(&self, bank: &DemoBank, target: usize, seed: u64) -> Result<MetaState> {
        let sources = self.source_tasks(bank, target, seed)?;
        reptile_meta(
            &sources,
            Array1::zeros(self.features.dim()),
            &self.meta_options(target, seed),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub algorithm: Algorithm,
    pub target: usize,
    pub m: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl fmt::Display for Job {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} target={} M={} seed={}",
            self.algorithm, self.target, self.m, self.seed
        )?;
        if let Some(l) = self.lambda {
            write!(f, " lambda={l}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JobOutcome {
    pub row: ResultRow,
    pub weights: Option<LearnedWeights>,
    pub seconds: f64,
}

struct Fit {
    theta: Array1<f64>,
    iterations: usize,
    converged: bool,
    final_grad_norm: f64,
}

impl Fit {
    fn new(theta: Array1<f64>, iterations: usize, converged: bool, final_grad_norm: f64) -> Self {
        Fit {
            theta,
            iterations,
            converged,
            final_grad_norm,
        }
    }
}

/// Demonstration sets keyed by `(task, role, seed)`.
#[derive(Debug, Clone, Default)]
pub struct DemoBank {
    sets: HashMap<(usize, Role, u64), DemoSet>,
}

impl DemoBank {
    /// Samples every set in `keys`.
    pub fn generate(exp: &Experiment, keys: &[(usize, Role, u64)]) -> Result<Self> {
        let sets = keys
            .par_iter()
            .map(|&(task, role, seed)| Ok(((task, role, seed), exp.generate_demos(task, role, seed)?)))
            .collect::<Result<_>>()?;
        Ok(DemoBank { sets })
    }

    /// Reads every set in `keys` from `dir`, checking each file against the
    /// configuration that should have produced it.
    pub fn load(exp: &Experiment, dir: &Path, keys: &[(usize, Role, u64)]) -> Result<Self> {
        let sets = keys
            .par_iter()
            .map(|&(task, role, seed)| {
                let label = &exp.tasks[task].label;
                let path = Experiment::demo_path(dir, label, role, seed);
                let set = DemoSet::read(&path)?;
                let expected_seed = exp.demo_seed(task, role, seed);
                if set.task_label != *label
                    || set.horizon != exp.config.horizon
                    || set.seed != expected_seed
                    || set.len() < exp.demo_count(role)
                {
                    return Err(Error::Config(format!(
                        "{} does not match the config (label {}, horizon {}, seed {}, {} trajectories); rerun gen-demos",
                        path.display(),
                        set.task_label,
                        set.horizon,
                        set.seed,
                        set.len()
                    )));
                }
                Ok(((task, role, seed), set))
            })
            .collect::<Result<_>>()?;
        Ok(DemoBank { sets })
    }

    pub fn get(&self, task: usize, role: Role, seed: u64) -> Result<&DemoSet> {
        self.sets
            .get(&(task, role, seed))
            .ok_or_else(|| Error::InvalidArgument(format!("no {role} demonstrations for task {task}, seed {seed}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, Role, u64), &DemoSet)> {
        self.sets.iter()
    }
}
