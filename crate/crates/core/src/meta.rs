//! Reptile meta-initialization of reward weights.
//!
//! Each outer step samples a task, runs `N` steps of exact MCE gradient
//! ascent starting from the current initialization `φ`, and moves `φ` part of
//! the way toward the result:
//!
//! ```text
//! θ_0 = φ_{t−1},   θ_{k+1} = θ_k + η ∇L(θ_k),   φ_t = φ_{t−1} + α(θ_N − φ_{t−1})
//! ```

use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::demos::{DemoRng, DemoSet};
use crate::error::{Error, Result};
use crate::irl::{fit_task, Ascent, FitOptions, IrlTask};
use crate::mdp::FeatureMap;
use crate::mdp::TabularMdp;
use crate::soft::PlannerOptions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaOptions {
    /// Inner-loop step size `η`.
    pub inner_lr: f64,
    /// Inner-loop steps `N`.
    pub inner_steps: usize,
    /// Interpolation factor `α`.
    pub outer_lr: f64,
    /// Outer steps `T`.
    pub outer_iters: usize,
    /// Seed for task sampling.
    pub seed: u64,
    pub planner: PlannerOptions,
}

impl Default for MetaOptions {
    fn default() -> Self {
        MetaOptions {
            inner_lr: 0.1,
            inner_steps: 10,
            outer_lr: 0.5,
            outer_iters: 200,
            seed: 0,
            planner: PlannerOptions::default(),
        }
    }
}

impl MetaOptions {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::InvalidArgument("inner_steps must be at least 1".into()));
        }
        if self.outer_iters == 0 {
            return Err(Error::InvalidArgument("outer_iters must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.outer_lr) {
            return Err(Error::InvalidArgument(format!(
                "outer_lr must lie in [0, 1], got {}",
                self.outer_lr
            )));
        }
        if !self.inner_lr.is_finite() || self.inner_lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "inner_lr must be finite and non-negative, got {}",
                self.inner_lr
            )));
        }
        Ok(())
    }
}

/// One outer step: which task was sampled and where its inner loop started
/// and ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerRun {
    pub task: String,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub phi: Vec<f64>,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_iters: usize,
    pub seed: u64,
    pub history: Vec<InnerRun>,
}

impl MetaState {
    pub fn phi(&self) -> Array1<f64> {
        Array1::from(self.phi.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "meta-initialization has non-finite entries".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.outer_lr) {
            return Err(Error::InvalidArgument(format!(
                "outer_lr must lie in [0, 1], got {}",
                self.outer_lr
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: MetaState = serde_json::from_str(&text)?;
        state.validate()?;
        Ok(state)
    }
}

/// Runs Reptile over `tasks`, sampling one uniformly at random per outer step.
///
/// Soft values are cached per task and reused as warm starts, so a single
/// task with `α = 1` follows exactly the iterates of an uninterrupted fit.
pub fn reptile_meta(tasks: &[IrlTask<'_>], phi0: Array1<f64>, opts: &MetaOptions) -> Result<MetaState> {
    opts.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("meta-training needs at least one task".into()));
    }
    if tasks.iter().any(|t| t.dim() != phi0.len()) {
        return Err(Error::Shape(format!(
            "initialization has length {}, which does not match every task's feature dimension",
            phi0.len()
        )));
    }
    let inner = FitOptions {
        lr: opts.inner_lr,
        planner: opts.planner,
        ..FitOptions::default()
    };
    let mut rng = DemoRng::seed_from_u64(opts.seed);
    let mut warm: Vec<Option<Array1<f64>>> = vec![None; tasks.len()];
    let mut phi = phi0;
    let mut history = Vec::with_capacity(opts.outer_iters);
    for _ in 0..opts.outer_iters {
        let i = rng.random_range(0..tasks.len());
        let task = &tasks[i];
        let mut ascent = Ascent::new(phi.clone(), opts.inner_lr).with_warm(warm[i].take());
        for _ in 0..opts.inner_steps {
            let s = ascent
                .evaluate(task, None, &inner)
                .map_err(|e| e.for_task(&task.label))?;
            ascent.apply(&s.gradient);
        }
        let (theta, cache) = ascent.into_parts();
        warm[i] = cache;
        let next = if opts.outer_lr == 1.0 {
            theta.clone()
        } else {
            &phi + &((&theta - &phi) * opts.outer_lr)
        };
        history.push(InnerRun {
            task: task.label.clone(),
            start: phi.to_vec(),
            end: theta.to_vec(),
        });
        phi = next;
    }
    Ok(MetaState {
        phi: phi.to_vec(),
        outer_lr: opts.outer_lr,
        inner_steps: opts.inner_steps,
        inner_lr: opts.inner_lr,
        outer_iters: opts.outer_iters,
        seed: opts.seed,
        history,
    })
}

/// `steps` MCE gradient-ascent steps on `demos` starting from the
/// meta-initialization.
pub fn finetune(
    meta: &MetaState,
    mdp: &TabularMdp,
    features: &FeatureMap,
    demos: &DemoSet,
    steps: usize,
    lr: f64,
    planner: &PlannerOptions,
) -> Result<Array1<f64>> {
    let task = IrlTask::from_demos(mdp, features, demos)?;
    finetune_task(&meta.phi(), &task, steps, lr, planner)
}

/// [`finetune`] from an arbitrary initialization on precomputed counts.
pub fn finetune_task(
    init: &Array1<f64>,
    task: &IrlTask<'_>,
    steps: usize,
    lr: f64,
    planner: &PlannerOptions,
) -> Result<Array1<f64>> {
    if init.len() != task.dim() {
        return Err(Error::Shape(format!(
            "initialization has length {}, feature dimension is {}",
            init.len(),
            task.dim()
        )));
    }
    let opts = FitOptions {
        lr,
        max_iter: steps,
        grad_tol: 0.0,
        step_halving: false,
        planner: *planner,
        ..FitOptions::default()
    };
    Ok(fit_task(task, init.clone(), &opts)?.0)
}
