//! Experiment configuration, read from a TOML file.
//!
//! ```toml
//! grid = "grid9.txt"          # relative to this file; omit for the shipped 9x9 fixture
//! discount = 0.95
//! horizon = 200
//! p_intended = 0.8
//! features = "one_hot_state"  # or "terrain"
//! source_demos = 200          # N, per source task
//! target_demos = [1, 2, 5, 20]
//! lambdas = [0.1]
//! sweep_lambdas = [0.01, 0.1, 1.0]
//! seeds = [0, 1, 2, 3, 4]
//! algorithms = ["single", "joint", "multitask"]
//! targets = []                # empty: every task is a target in turn
//! output_dir = "results"
//!
//! [fit]                       # gradient ascent, shared by every fit
//! lr = 0.1
//! max_iter = 300
//! grad_tol = 1e-4
//! step_halving = true
//! divergence_window = 50
//! planner = { tol = 1e-10, max_iter = 100000, policy_steps = 20 }
//!
//! [meta]
//! inner_lr = 0.1
//! inner_steps = 10
//! outer_lr = 0.5
//! outer_iters = 200
//! finetune_steps = 20
//! finetune_lr = 0.1
//!
//! [[tasks]]                   # omit for the A, B and A+B tasks
//! label = "A"
//! dirt = 0.0
//! grass = -1.0
//! lava = -10.0
//! gold = 0.0
//! silver = 5.0
//!
//! [family]                    # alternative to [[tasks]]: randomized gold/silver weights
//! size = 8
//! seed = 0
//! gold = [-5.0, 5.0]
//! silver = [-5.0, 5.0]
//! ```
//!
//! Every task other than the current target acts as a source task with
//! `source_demos` demonstrations.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::demos::DemoRng;
use crate::error::{Error, Result};
use crate::gridworld::{FeatureKind, TaskRewardSpec, DEFAULT_P_INTENDED, FIXTURE_9X9};
use crate::irl::FitOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Single-task IRL on the target demos alone.
    Single,
    /// Single-task IRL on the concatenation of every task's demos.
    Joint,
    /// Shared-mean regularized IRL over all tasks, once per `λ`.
    Multitask,
    /// Reptile over the source tasks, then finetuning on the target.
    Meta,
    /// The same finetuning budget as `meta`, started from zero weights.
    FinetuneZero,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Single,
        Algorithm::Joint,
        Algorithm::Multitask,
        Algorithm::Meta,
        Algorithm::FinetuneZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Single => "single",
            Algorithm::Joint => "joint",
            Algorithm::Multitask => "multitask",
            Algorithm::Meta => "meta",
            Algorithm::FinetuneZero => "finetune_zero",
        }
    }

    /// Whether the algorithm uses source-task demonstrations.
    pub fn needs_sources(self) -> bool {
        !matches!(self, Algorithm::Single | Algorithm::FinetuneZero)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub label: String,
    pub dirt: f64,
    pub grass: f64,
    pub lava: f64,
    pub gold: f64,
    pub silver: f64,
}

impl TaskConfig {
    pub fn new(label: &str, spec: TaskRewardSpec) -> Self {
        TaskConfig {
            label: label.to_string(),
            dirt: spec.dirt,
            grass: spec.grass,
            lava: spec.lava,
            gold: spec.gold,
            silver: spec.silver,
        }
    }

    pub fn spec(&self) -> TaskRewardSpec {
        TaskRewardSpec::new(self.dirt, self.grass, self.lava, self.gold, self.silver)
    }
}

/// Tasks sharing dirt, grass and lava weights, with gold and silver weights
/// drawn uniformly from the given ranges. Labels are `F0`, `F1`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub size: usize,
    pub seed: u64,
    pub gold: [f64; 2],
    pub silver: [f64; 2],
    pub dirt: f64,
    pub grass: f64,
    pub lava: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            size: 8,
            seed: 0,
            gold: [-5.0, 5.0],
            silver: [-5.0, 5.0],
            dirt: 0.0,
            grass: -1.0,
            lava: -10.0,
        }
    }
}

impl FamilyConfig {
    pub fn tasks(&self) -> Vec<TaskConfig> {
        let mut rng = DemoRng::seed_from_u64(self.seed);
        (0..self.size)
            .map(|i| {
                let gold = self.gold[0] + (self.gold[1] - self.gold[0]) * rng.random::<f64>();
                let silver = self.silver[0] + (self.silver[1] - self.silver[0]) * rng.random::<f64>();
                TaskConfig::new(
                    &format!("F{i}"),
                    TaskRewardSpec::new(self.dirt, self.grass, self.lava, gold, silver),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub outer_iters: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.1,
            inner_steps: 10,
            outer_lr: 0.5,
            outer_iters: 200,
            finetune_steps: 20,
            finetune_lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: Option<PathBuf>,
    pub discount: f64,
    pub horizon: usize,
    pub p_intended: f64,
    pub features: FeatureKind,
    pub source_demos: usize,
    pub target_demos: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub sweep_lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub targets: Vec<String>,
    pub output_dir: PathBuf,
    pub fit: FitOptions,
    pub meta: MetaConfig,
    pub tasks: Vec<TaskConfig>,
    pub family: Option<FamilyConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: None,
            discount: 0.95,
            horizon: 200,
            p_intended: DEFAULT_P_INTENDED,
            features: FeatureKind::OneHotState,
            source_demos: 200,
            target_demos: vec![1, 2, 5, 20],
            lambdas: vec![0.1],
            sweep_lambdas: vec![0.01, 0.1, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
            algorithms: vec![Algorithm::Single, Algorithm::Joint, Algorithm::Multitask],
            targets: Vec::new(),
            output_dir: PathBuf::from("results"),
            fit: FitOptions::default(),
            meta: MetaConfig::default(),
            tasks: Vec::new(),
            family: None,
        }
    }
}

fn field(name: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("field `{name}`: {msg}"))
}

impl ExperimentConfig {
    /// Parses and validates a config file. A relative `grid` path is
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(grid) = &config.grid {
            if grid.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new(""));
                config.grid = Some(base.join(grid));
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Parses without validating.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Grid text: the configured file, or the shipped fixture.
    pub fn grid_text(&self) -> Result<String> {
        match &self.grid {
            Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e)),
            None => Ok(FIXTURE_9X9.to_string()),
        }
    }

    /// Explicit tasks, else the generated family, else A, B and A+B.
    pub fn task_configs(&self) -> Vec<TaskConfig> {
        if !self.tasks.is_empty() {
            self.tasks.clone()
        } else if let Some(family) = &self.family {
            family.tasks()
        } else {
            vec![
                TaskConfig::new("A", TaskRewardSpec::task_a()),
                TaskConfig::new("B", TaskRewardSpec::task_b()),
                TaskConfig::new("A+B", TaskRewardSpec::task_a_plus_b()),
            ]
        }
    }

    pub fn target_labels(&self) -> Vec<String> {
        if self.targets.is_empty() {
            self.task_configs().into_iter().map(|t| t.label).collect()
        } else {
            self.targets.clone()
        }
    }

    pub fn max_target_demos(&self) -> usize {
        self.target_demos.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(field("discount", format!("{} outside [0, 1)", self.discount)));
        }
        if self.horizon == 0 {
            return Err(field("horizon", "must be positive"));
        }
        if !(self.p_intended > 0.0 && self.p_intended <= 1.0) {
            return Err(field("p_intended", format!("{} outside (0, 1]", self.p_intended)));
        }
        if self.source_demos == 0 {
            return Err(field("source_demos", "must be positive"));
        }
        if self.target_demos.is_empty() || self.target_demos.contains(&0) {
            return Err(field("target_demos", "must be a non-empty list of positive counts"));
        }
        for (name, list) in [("lambdas", &self.lambdas), ("sweep_lambdas", &self.sweep_lambdas)] {
            if list.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(field(name, "values must be finite and non-negative"));
            }
        }
        if self.algorithms.contains(&Algorithm::Multitask) && self.lambdas.is_empty() {
            return Err(field("lambdas", "multitask runs need at least one value"));
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "must not be empty"));
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(field("seeds", format!("duplicate seed {s}")));
            }
        }
        if self.algorithms.is_empty() {
            return Err(field("algorithms", "must not be empty"));
        }
        if !(self.fit.lr.is_finite() && self.fit.lr > 0.0) {
            return Err(field("fit.lr", "must be positive"));
        }
        if self.fit.max_iter == 0 {
            return Err(field("fit.max_iter", "must be positive"));
        }
        if self.fit.divergence_window == 0 {
            return Err(field("fit.divergence_window", "must be positive"));
        }
        if !(self.fit.planner.tol > 0.0) || self.fit.planner.max_iter == 0 {
            return Err(field("fit.planner", "tolerance and iteration budget must be positive"));
        }
        let m = &self.meta;
        if m.inner_steps == 0 || m.outer_iters == 0 {
            return Err(field("meta", "inner_steps and outer_iters must be positive"));
        }
        if !(0.0..=1.0).contains(&m.outer_lr) {
            return Err(field("meta.outer_lr", format!("{} outside [0, 1]", m.outer_lr)));
        }
        if !(m.inner_lr >= 0.0 && m.finetune_lr >= 0.0) {
            return Err(field("meta", "learning rates must be non-negative"));
        }
        if !self.tasks.is_empty() && self.family.is_some() {
            return Err(field("family", "give either [[tasks]] or [family], not both"));
        }
        if let Some(f) = &self.family {
            if f.size == 0 {
                return Err(field("family.size", "must be positive"));
            }
            if f.gold[0] > f.gold[1] || f.silver[0] > f.silver[1] {
                return Err(field("family", "ranges must be [low, high]"));
            }
        }
        let tasks = self.task_configs();
        let mut labels = HashSet::new();
        for t in &tasks {
            if t.label.is_empty() || !t.label.chars().all(|c| c.is_ascii_alphanumeric() || "+-_.".contains(c)) {
                return Err(field(
                    "tasks.label",
                    format!("{:?} must be non-empty ASCII letters, digits or +-_.", t.label),
                ));
            }
            if !labels.insert(t.label.as_str()) {
                return Err(field("tasks.label", format!("duplicate label {:?}", t.label)));
            }
            t.spec()
                .validate()
                .map_err(|_| field("tasks", format!("task {:?} has non-finite weights", t.label)))?;
        }
        if tasks.len() < 2 && self.algorithms.iter().any(|a| a.needs_sources()) {
            return Err(field("tasks", "joint, multitask and meta runs need at least two tasks"));
        }
        for target in &self.targets {
            if !labels.contains(target.as_str()) {
                return Err(field("targets", format!("unknown task {target:?}")));
            }
        }
        if let Some(grid) = &self.grid {
            if !grid.is_file() {
                return Err(field("grid", format!("{} does not exist", grid.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        let labels: Vec<String> = c.task_configs().into_iter().map(|t| t.label).collect();
        assert_eq!(labels, ["A", "B", "A+B"]);
        assert_eq!(c.task_configs()[0].spec(), TaskRewardSpec::task_a());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.family = Some(FamilyConfig::default());
        c.algorithms = vec![Algorithm::Meta, Algorithm::FinetuneZero];
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn explicit_tasks_parse() {
        let c = ExperimentConfig::from_toml(
            "seeds = [3]\n[[tasks]]\nlabel = \"x\"\ndirt = 0\ngrass = -1\nlava = -10\ngold = 1\nsilver = 2\n\
             [[tasks]]\nlabel = \"y\"\ndirt = 0\ngrass = -1\nlava = -10\ngold = 2.5\nsilver = 0\n",
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.task_configs()[1].gold, 2.5);
        assert_eq!(c.target_labels(), ["x", "y"]);
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases = [
            ("seeds = [1, 1]", "seeds"),
            ("target_demos = [0]", "target_demos"),
            ("source_demos = 0", "source_demos"),
            ("discount = 1.0", "discount"),
            ("targets = [\"C\"]", "targets"),
            ("lambdas = [-1.0]", "lambdas"),
            ("grid = \"/nonexistent/grid.txt\"", "grid"),
            ("[meta]\nouter_lr = 2.0", "meta.outer_lr"),
            ("[family]\nsize = 0", "family.size"),
        ];
        for (text, name) in cases {
            let err = ExperimentConfig::from_toml(text).unwrap().validate().unwrap_err();
            assert!(err.to_string().contains(&format!("`{name}`")), "{text}: {err}");
        }
        assert!(matches!(
            ExperimentConfig::from_toml("unknown_key = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn family_is_seeded_and_shares_base_weights() {
        let f = FamilyConfig::default();
        let a = f.tasks();
        assert_eq!(a, f.tasks());
        assert_eq!(a.len(), 8);
        for t in &a {
            assert_eq!((t.dirt, t.grass, t.lava), (0.0, -1.0, -10.0));
            assert!((-5.0..=5.0).contains(&t.gold) && (-5.0..=5.0).contains(&t.silver));
        }
        let other = FamilyConfig { seed: 1, ..f }.tasks();
        assert_ne!(a, other);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("bogus".parse::<Algorithm>().is_err());
    }
}
