//! Maximum causal entropy IRL by exact gradient ascent.
//!
//! The objective maximized for one task is the expected discounted causal
//! log-likelihood of its demonstrations,
//!
//! ```text
//! L(θ) = θ·φ(D) − Σ_s μ0(s) V_soft_θ(s),     ∇L(θ) = φ(D) − F(π_θ)
//! ```
//!
//! where `φ(D)` are the empirical discounted feature counts of the demos and
//! `F(π_θ)` the exact feature expectations of the soft-optimal policy for the
//! reward `θ·φ`. The multi-task variant ties each task's weights to the mean
//! of the current iterates:
//!
//! ```text
//! L_i(θ_i) = L(θ_i; D_i) − ½λ‖θ_i − θ̄‖²,    ∇L_i = φ(D_i) − F(π_{θ_i}) − λ(θ_i − θ̄)
//! ```

use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demos::{empirical_feature_counts, DemoSet};
use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, TabularMdp};
use crate::soft::{feature_expectations, occupancy, soft_value_iteration_from, PlannerOptions, SoftPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Constant ascent step size (before any halving).
    pub lr: f64,
    pub max_iter: usize,
    /// Stop once `‖∇‖∞ ≤ grad_tol` (for every task, when fitting several).
    pub grad_tol: f64,
    /// Halve a task's step size whenever its objective falls.
    pub step_halving: bool,
    /// Abort after this many consecutive objective decreases.
    pub divergence_window: usize,
    pub planner: PlannerOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lr: 0.1,
            max_iter: 300,
            grad_tol: 1e-4,
            step_halving: true,
            divergence_window: 50,
            planner: PlannerOptions::default(),
        }
    }
}

/// One IRL problem: dynamics, features and the demo feature counts.
#[derive(Debug, Clone)]
pub struct IrlTask<'a> {
    pub label: String,
    pub mdp: &'a TabularMdp,
    pub features: &'a FeatureMap,
    pub demo_counts: Array1<f64>,
}

impl<'a> IrlTask<'a> {
    pub fn from_demos(mdp: &'a TabularMdp, features: &'a FeatureMap, demos: &DemoSet) -> Result<Self> {
        features.check_mdp(mdp)?;
        Ok(IrlTask {
            label: demos.task_label.clone(),
            mdp,
            features,
            demo_counts: empirical_feature_counts(demos, features, mdp.discount())?,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }
}

/// Everything computed while evaluating the gradient at one `θ`.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub gradient: Array1<f64>,
    /// `θ·φ(D) − μ0·V_soft`.
    pub objective: f64,
    pub expectations: Array1<f64>,
    pub policy: SoftPolicy,
}

/// Gradient and objective at `theta`, optionally warm-starting soft value
/// iteration from `warm`.
pub fn evaluate(
    mdp: &TabularMdp,
    features: &FeatureMap,
    theta: &Array1<f64>,
    demo_counts: &Array1<f64>,
    planner: &PlannerOptions,
    warm: Option<&Array1<f64>>,
) -> Result<GradientEval> {
    features.check_mdp(mdp)?;
    if demo_counts.len() != features.dim() {
        return Err(Error::Shape(format!(
            "demo counts have length {}, feature dimension is {}",
            demo_counts.len(),
            features.dim()
        )));
    }
    let reward = features.reward(theta)?;
    let policy = soft_value_iteration_from(mdp, &reward, warm, planner)?;
    let occ = occupancy(mdp, &policy.pi, planner.tol)?;
    let expectations = feature_expectations(&occ, features)?;
    let objective = theta.dot(demo_counts) - mdp.initial_dist().dot(&policy.v_soft);
    Ok(GradientEval {
        gradient: demo_counts - &expectations,
        objective,
        expectations,
        policy,
    })
}

/// `φ(D) − F(π_θ)`.
pub fn mce_gradient(
    mdp: &TabularMdp,
    features: &FeatureMap,
    theta: &Array1<f64>,
    demo_counts: &Array1<f64>,
    planner: &PlannerOptions,
) -> Result<Array1<f64>> {
    Ok(evaluate(mdp, features, theta, demo_counts, planner, None)?.gradient)
}

/// The unregularized objective `θ·φ(D) − μ0·V_soft_θ`, computed from soft
/// values alone.
pub fn causal_log_likelihood(
    mdp: &TabularMdp,
    features: &FeatureMap,
    theta: &Array1<f64>,
    demo_counts: &Array1<f64>,
    planner: &PlannerOptions,
) -> Result<f64> {
    let reward = features.reward(theta)?;
    let policy = soft_value_iteration_from(mdp, &reward, None, planner)?;
    Ok(theta.dot(demo_counts) - mdp.initial_dist().dot(&policy.v_soft))
}

/// `−λ(θ_i − θ̄)`.
pub fn regularizer_gradient(theta: &Array1<f64>, mean: &Array1<f64>, lambda: f64) -> Array1<f64> {
    (theta - mean) * -lambda
}

pub fn mean_of(thetas: &[Array1<f64>]) -> Array1<f64> {
    let mut mean = Array1::zeros(thetas[0].len());
    for t in thetas {
        mean += t;
    }
    mean / thetas.len() as f64
}

pub fn sup_norm(x: &Array1<f64>) -> f64 {
    x.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub labels: Vec<String>,
    pub thetas: Vec<Array1<f64>>,
    pub mean: Array1<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// `‖∇‖∞` per task at the last evaluated iterate.
    pub final_grad_norms: Vec<f64>,
    /// Objective (summed over tasks) at each evaluated iterate.
    pub loss_trace: Vec<f64>,
    pub elapsed_secs: f64,
}

/// Per-task ascent state: iterate, step size and warm start.
#[derive(Debug, Clone)]
pub(crate) struct Ascent {
    pub theta: Array1<f64>,
    pub lr: f64,
    warm: Option<Array1<f64>>,
}

pub(crate) struct Step {
    pub gradient: Array1<f64>,
    pub objective: f64,
}

impl Ascent {
    pub fn new(theta: Array1<f64>, lr: f64) -> Self {
        Ascent { theta, lr, warm: None }
    }

    /// Seeds soft value iteration for the next evaluation.
    pub fn with_warm(mut self, warm: Option<Array1<f64>>) -> Self {
        self.warm = warm;
        self
    }

    pub fn into_parts(self) -> (Array1<f64>, Option<Array1<f64>>) {
        (self.theta, self.warm)
    }

    /// Gradient and objective at the current iterate, with the shared-mean
    /// penalty when `prior` is given and `λ ≠ 0`.
    pub fn evaluate(
        &mut self,
        task: &IrlTask<'_>,
        prior: Option<(&Array1<f64>, f64)>,
        opts: &FitOptions,
    ) -> Result<Step> {
        let eval = evaluate(
            task.mdp,
            task.features,
            &self.theta,
            &task.demo_counts,
            &opts.planner,
            self.warm.as_ref(),
        )?;
        self.warm = Some(eval.policy.v_soft);
        let mut gradient = eval.gradient;
        let mut objective = eval.objective;
        if let Some((mean, lambda)) = prior {
            if lambda != 0.0 {
                let diff = &self.theta - mean;
                gradient.scaled_add(-lambda, &diff);
                objective -= 0.5 * lambda * diff.dot(&diff);
            }
        }
        Ok(Step { gradient, objective })
    }

    pub fn apply(&mut self, gradient: &Array1<f64>) {
        self.theta.scaled_add(self.lr, gradient);
    }
}

/// Tracks consecutive decreases of the objective being ascended.
#[derive(Debug, Clone, Default)]
pub(crate) struct Monitor {
    last: Option<f64>,
    decreases: usize,
}

impl Monitor {
    /// Records `objective`; returns whether it fell, or a divergence error
    /// once it has fallen `window` times in a row.
    pub fn observe(&mut self, objective: f64, window: usize, iteration: usize) -> Result<bool> {
        let fell = self.last.is_some_and(|prev| objective < prev);
        self.last = Some(objective);
        if !fell {
            self.decreases = 0;
            return Ok(false);
        }
        self.decreases += 1;
        if self.decreases >= window {
            return Err(Error::Divergence {
                iteration,
                window,
                objective,
            });
        }
        Ok(true)
    }
}

/// Single-task MCE IRL from `θ = 0`.
pub fn fit_single(
    mdp: &TabularMdp,
    features: &FeatureMap,
    demos: &DemoSet,
    opts: &FitOptions,
) -> Result<(Array1<f64>, FitReport)> {
    let task = IrlTask::from_demos(mdp, features, demos)?;
    fit_task(&task, Array1::zeros(task.dim()), opts)
}

/// Gradient ascent on one task from an arbitrary start.
pub fn fit_task(task: &IrlTask<'_>, init: Array1<f64>, opts: &FitOptions) -> Result<(Array1<f64>, FitReport)> {
    let start = Instant::now();
    let mut ascent = Ascent::new(init, opts.lr);
    let mut monitor = Monitor::default();
    let mut loss_trace = Vec::new();
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let step = ascent.evaluate(task, None, opts).map_err(|e| e.for_task(&task.label))?;
        if monitor
            .observe(step.objective, opts.divergence_window, iterations)
            .map_err(|e| e.for_task(&task.label))?
            && opts.step_halving
        {
            ascent.lr *= 0.5;
        }
        loss_trace.push(step.objective);
        grad_norm = sup_norm(&step.gradient);
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }
        ascent.apply(&step.gradient);
        iterations += 1;
    }
    Ok((
        ascent.theta,
        FitReport {
            iterations,
            converged,
            final_grad_norms: vec![grad_norm],
            loss_trace,
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Regularized multi-task MCE IRL with synchronous updates.
///
/// Every iteration recomputes `θ̄` from the current iterates, evaluates all
/// tasks (in parallel) and then steps all of them. Because the deviations
/// from the mean sum to zero, this is gradient ascent on the summed
/// objective `Σ_i L_i(θ_i) − ½λ‖θ_i − θ̄‖²`, which is what the divergence
/// check and step halving watch.
pub fn fit_multitask(tasks: &[IrlTask<'_>], lambda: f64, opts: &FitOptions) -> Result<(TaskParams, FitReport)> {
    if tasks.len() < 2 {
        return Err(Error::InvalidArgument(
            "multi-task fitting needs at least two tasks".into(),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let dim = tasks[0].dim();
    if tasks.iter().any(|t| t.dim() != dim) {
        return Err(Error::Shape("all tasks must share a feature dimension".into()));
    }
    let start = Instant::now();
    let mut ascents: Vec<Ascent> = tasks.iter().map(|_| Ascent::new(Array1::zeros(dim), opts.lr)).collect();
    let mut monitor = Monitor::default();
    let mut loss_trace = Vec::new();
    let mut grad_norms = vec![f64::INFINITY; tasks.len()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let thetas: Vec<Array1<f64>> = ascents.iter().map(|a| a.theta.clone()).collect();
        let mean = mean_of(&thetas);
        let steps = ascents
            .par_iter_mut()
            .zip(tasks.par_iter())
            .map(|(ascent, task)| {
                ascent
                    .evaluate(task, Some((&mean, lambda)), opts)
                    .map_err(|e| e.for_task(&task.label))
            })
            .collect::<Result<Vec<Step>>>()?;
        let total: f64 = steps.iter().map(|s| s.objective).sum();
        if monitor.observe(total, opts.divergence_window, iterations)? && opts.step_halving {
            for ascent in &mut ascents {
                ascent.lr *= 0.5;
            }
        }
        loss_trace.push(total);
        for (norm, step) in grad_norms.iter_mut().zip(&steps) {
            *norm = sup_norm(&step.gradient);
        }
        if grad_norms.iter().all(|&g| g <= opts.grad_tol) {
            converged = true;
            break;
        }
        for (ascent, step) in ascents.iter_mut().zip(&steps) {
            ascent.apply(&step.gradient);
        }
        iterations += 1;
    }
    let thetas: Vec<Array1<f64>> = ascents.into_iter().map(|a| a.theta).collect();
    Ok((
        TaskParams {
            labels: tasks.iter().map(|t| t.label.clone()).collect(),
            mean: mean_of(&thetas),
            thetas,
            lambda,
        },
        FitReport {
            iterations,
            converged,
            final_grad_norms: grad_norms,
            loss_trace,
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Single-task IRL on the concatenation of every task's demonstrations.
/// Tasks must share dynamics.
pub fn fit_joint_baseline(
    mdp: &TabularMdp,
    features: &FeatureMap,
    demo_sets: &[&DemoSet],
    opts: &FitOptions,
) -> Result<(Array1<f64>, FitReport)> {
    let joint = DemoSet::concat("joint", demo_sets)?;
    fit_single(mdp, features, &joint, opts)
}

/// Learned weights plus the metadata needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedWeights {
    pub task_label: String,
    pub algorithm: String,
    pub feature_kind: String,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
}

impl LearnedWeights {
    pub fn theta(&self) -> Array1<f64> {
        Array1::from(self.theta.clone())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::sample_trajectories;
    use crate::gridworld::{build_mdp, feature_map, parse_grid, FeatureKind, TaskRewardSpec};
    use crate::mdp::{greedy_policy, policy_value, value_iteration, Policy};
    use crate::soft::soft_value_iteration;
    use crate::testutil::random_mdp;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize) -> FeatureMap {
        FeatureMap::new(Array3::from_shape_fn((n, m, k), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn planner() -> PlannerOptions {
        PlannerOptions {
            tol: 1e-12,
            ..PlannerOptions::default()
        }
    }

    #[test]
    fn gradient_vanishes_when_counts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let phi = random_features(&mut rng, 4, 3, 3);
        let theta = Array1::from(vec![0.4, -0.2, 1.0]);
        let eval = evaluate(&mdp, &phi, &theta, &Array1::zeros(3), &planner(), None).unwrap();
        let g = mce_gradient(&mdp, &phi, &theta, &eval.expectations, &planner()).unwrap();
        assert!(sup_norm(&g) < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let phi = random_features(&mut rng, 4, 3, 3);
        let counts = Array1::from(vec![1.5, -2.0, 0.7]);
        let theta = Array1::from(vec![0.3, -0.5, 0.8]);
        let g = mce_gradient(&mdp, &phi, &theta, &counts, &planner()).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut up = theta.clone();
            up[k] += h;
            let mut down = theta.clone();
            down[k] -= h;
            let fd = (causal_log_likelihood(&mdp, &phi, &up, &counts, &planner()).unwrap()
                - causal_log_likelihood(&mdp, &phi, &down, &counts, &planner()).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1e-3),
                "k={k}: fd {fd} analytic {}",
                g[k]
            );
        }
    }

    #[test]
    fn expert_weights_are_stationary_up_to_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let phi = random_features(&mut rng, 4, 3, 2);
        let theta_star = Array1::from(vec![1.0, -0.5]);
        let expert = soft_value_iteration(&mdp, &phi.reward(&theta_star).unwrap(), &planner()).unwrap();
        // Exact expert counts in place of sampled demos: zero gradient.
        let occ = occupancy(&mdp, &expert.pi, 1e-12).unwrap();
        let counts = feature_expectations(&occ, &phi).unwrap();
        let g = mce_gradient(&mdp, &phi, &theta_star, &counts, &planner()).unwrap();
        assert!(sup_norm(&g) < 1e-9);
        // Sampled demos with 0.9^H < 1e-6: zero up to sampling noise.
        let demos = sample_trajectories(&mdp, &expert.pi, "expert", 132, 20_000, 4).unwrap();
        let task = IrlTask::from_demos(&mdp, &phi, &demos).unwrap();
        let g = mce_gradient(&mdp, &phi, &theta_star, &task.demo_counts, &planner()).unwrap();
        assert!(sup_norm(&g) < 0.05 * sup_norm(&counts), "{g}");
    }

    fn symmetric_ring() -> (TabularMdp, FeatureMap) {
        // Four states on a ring; action 0 steps clockwise, 1 counter-clockwise,
        // both slip to the other direction with probability 0.2.
        let mut t = Array3::zeros((4, 2, 4));
        for s in 0..4 {
            t[[s, 0, (s + 1) % 4]] += 0.8;
            t[[s, 0, (s + 3) % 4]] += 0.2;
            t[[s, 1, (s + 3) % 4]] += 0.8;
            t[[s, 1, (s + 1) % 4]] += 0.2;
        }
        let mdp = TabularMdp::new(t, 0.9, Array1::from_elem(4, 0.25), None).unwrap();
        let phi = FeatureMap::new(Array3::from_shape_fn((4, 2, 4), |(s, _, k)| f64::from(s == k))).unwrap();
        (mdp, phi)
    }

    #[test]
    fn zero_reward_expert_recovers_near_uniform_policy() {
        let (mdp, phi) = symmetric_ring();
        let expert = Policy::uniform(4, 2);
        let demos = sample_trajectories(&mdp, &expert, "uniform", 132, 2000, 5).unwrap();
        let (theta, _) = fit_single(&mdp, &phi, &demos, &FitOptions::default()).unwrap();
        let learned = soft_value_iteration(&mdp, &phi.reward(&theta).unwrap(), &planner()).unwrap();
        for p in learned.pi.table().iter() {
            assert!((p - 0.5).abs() < 0.05, "{p}");
        }
    }

    #[test]
    fn duplicated_demos_leave_fit_unchanged() {
        let (mdp, phi) = symmetric_ring();
        let demos = sample_trajectories(&mdp, &Policy::uniform(4, 2), "d", 40, 7, 1).unwrap();
        let doubled = DemoSet::concat("d", &[&demos, &demos]).unwrap();
        let opts = FitOptions {
            max_iter: 40,
            ..FitOptions::default()
        };
        let (a, ra) = fit_single(&mdp, &phi, &demos, &opts).unwrap();
        let (b, rb) = fit_single(&mdp, &phi, &doubled, &opts).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_eq!(ra.iterations, rb.iterations);
    }

    #[test]
    fn objective_is_monotone_with_small_steps() {
        let grid = parse_grid("dgdS\nldgd\nGdld").unwrap();
        let (mdp, _) = build_mdp(&grid, &TaskRewardSpec::task_a(), 0.9).unwrap();
        let expert = soft_value_iteration(&mdp, mdp.reward().unwrap(), &planner()).unwrap();
        let demos = sample_trajectories(&mdp, &expert.pi, "A", 100, 50, 2).unwrap();
        let phi = feature_map(&grid, FeatureKind::OneHotState);
        let opts = FitOptions {
            lr: 1e-2,
            max_iter: 200,
            ..FitOptions::default()
        };
        let (_, report) = fit_single(&mdp, &phi, &demos, &opts).unwrap();
        for w in report.loss_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn monitor_counts_only_consecutive_decreases() {
        let mut m = Monitor::default();
        assert!(!m.observe(1.0, 3, 0).unwrap());
        assert!(m.observe(0.5, 3, 1).unwrap());
        assert!(m.observe(0.4, 3, 2).unwrap());
        assert!(!m.observe(0.4, 3, 3).unwrap());
        assert!(m.observe(0.3, 3, 4).unwrap());
        assert!(m.observe(0.2, 3, 5).unwrap());
        assert!(matches!(
            m.observe(0.1, 3, 6),
            Err(Error::Divergence {
                iteration: 6,
                window: 3,
                ..
            })
        ));
    }

    #[test]
    fn multitask_summed_objective_is_monotone_with_small_steps() {
        let grid = parse_grid("dgdS\nldgd\nGdld").unwrap();
        let phi = feature_map(&grid, FeatureKind::OneHotState);
        let specs = [
            TaskRewardSpec::task_a(),
            TaskRewardSpec::task_b(),
            TaskRewardSpec::task_a_plus_b(),
        ];
        let mdps: Vec<TabularMdp> = specs.iter().map(|t| build_mdp(&grid, t, 0.9).unwrap().0).collect();
        let demos: Vec<DemoSet> = mdps
            .iter()
            .enumerate()
            .map(|(i, mdp)| {
                let expert = soft_value_iteration(mdp, mdp.reward().unwrap(), &planner()).unwrap();
                sample_trajectories(
                    mdp,
                    &expert.pi,
                    &format!("t{i}"),
                    100,
                    if i == 2 { 2 } else { 50 },
                    i as u64,
                )
                .unwrap()
            })
            .collect();
        let tasks: Vec<IrlTask> = mdps
            .iter()
            .zip(&demos)
            .map(|(m, d)| IrlTask::from_demos(m, &phi, d).unwrap())
            .collect();
        let opts = FitOptions {
            lr: 1e-2,
            max_iter: 200,
            divergence_window: 1,
            ..FitOptions::default()
        };
        let (params, report) = fit_multitask(&tasks, 1.0, &opts).unwrap();
        for w in report.loss_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(sup_norm(&(&params.mean - &mean_of(&params.thetas))) <= 1e-12);
    }

    #[test]
    fn divergence_is_detected() {
        let grid = parse_grid("dgdS\nldgd\nGdld").unwrap();
        let (mdp, _) = build_mdp(&grid, &TaskRewardSpec::task_a(), 0.9).unwrap();
        let expert = soft_value_iteration(&mdp, mdp.reward().unwrap(), &planner()).unwrap();
        let demos = sample_trajectories(&mdp, &expert.pi, "A", 60, 20, 2).unwrap();
        let phi = feature_map(&grid, FeatureKind::Terrain);
        let opts = FitOptions {
            lr: 50.0,
            max_iter: 500,
            divergence_window: 1,
            ..FitOptions::default()
        };
        let err = fit_single(&mdp, &phi, &demos, &opts).unwrap_err();
        assert!(
            matches!(err, Error::Task { ref source, .. } if matches!(**source, Error::Divergence { .. })),
            "{err}"
        );
    }

    fn grid_tasks(seed: u64, n: usize) -> (TabularMdp, FeatureMap, Vec<DemoSet>) {
        let grid = parse_grid("dgdS\nldgd\nGdld").unwrap();
        let phi = feature_map(&grid, FeatureKind::OneHotState);
        let mut mdp = None;
        let demos = [TaskRewardSpec::task_a(), TaskRewardSpec::task_b()]
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let (m, _) = build_mdp(&grid, task, 0.9).unwrap();
                let expert = soft_value_iteration(&m, m.reward().unwrap(), &planner()).unwrap();
                let d = sample_trajectories(&m, &expert.pi, &format!("t{i}"), 60, n, seed + i as u64).unwrap();
                mdp = Some(m);
                d
            })
            .collect();
        (mdp.unwrap().with_reward(None).unwrap(), phi, demos)
    }

    #[test]
    fn multitask_without_regularizer_matches_independent_fits() {
        let (mdp, phi, demos) = grid_tasks(10, 5);
        let opts = FitOptions {
            max_iter: 30,
            grad_tol: 0.0,
            step_halving: false,
            ..FitOptions::default()
        };
        let tasks: Vec<IrlTask> = demos
            .iter()
            .map(|d| IrlTask::from_demos(&mdp, &phi, d).unwrap())
            .collect();
        let (params, _) = fit_multitask(&tasks, 0.0, &opts).unwrap();
        for (i, d) in demos.iter().enumerate() {
            let (theta, _) = fit_single(&mdp, &phi, d, &opts).unwrap();
            assert_eq!(params.thetas[i], theta);
        }
    }

    #[test]
    fn regularizer_gradients_cancel_across_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let thetas: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_shape_fn(6, |_| rng.random_range(-5.0..5.0)))
            .collect();
        let mean = mean_of(&thetas);
        let mut total = Array1::<f64>::zeros(6);
        for t in &thetas {
            total += &regularizer_gradient(t, &mean, 0.7);
        }
        assert!(sup_norm(&(total / 4.0)) < 1e-12);
        // Equal iterates: no regularizer contribution.
        let same = vec![thetas[0].clone(), thetas[0].clone()];
        let m = mean_of(&same);
        assert!(regularizer_gradient(&same[1], &m, 3.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn strong_prior_collapses_spread() {
        let (mdp, phi, demos) = grid_tasks(20, 50);
        let tasks: Vec<IrlTask> = demos
            .iter()
            .map(|d| IrlTask::from_demos(&mdp, &phi, d).unwrap())
            .collect();
        let opts = FitOptions {
            lr: 2e-3,
            max_iter: 3000,
            grad_tol: 1e-3,
            step_halving: true,
            ..FitOptions::default()
        };
        let (params, _) = fit_multitask(&tasks, 100.0, &opts).unwrap();
        let spread = params
            .thetas
            .iter()
            .map(|t| (t - &params.mean).dot(&(t - &params.mean)).sqrt())
            .fold(0.0, f64::max);
        let size = params.thetas.iter().map(|t| t.dot(t).sqrt()).fold(0.0, f64::max);
        assert!(spread < 0.05 * size, "spread {spread}, size {size}");
        assert!(sup_norm(&(mean_of(&params.thetas) - &params.mean)) < 1e-12);
    }

    #[test]
    fn joint_baseline_is_order_free_and_reduces_to_single() {
        let (mdp, phi, demos) = grid_tasks(30, 4);
        let opts = FitOptions {
            max_iter: 25,
            ..FitOptions::default()
        };
        let (ab, _) = fit_joint_baseline(&mdp, &phi, &[&demos[0], &demos[1]], &opts).unwrap();
        let (ba, _) = fit_joint_baseline(&mdp, &phi, &[&demos[1], &demos[0]], &opts).unwrap();
        for (x, y) in ab.iter().zip(ba.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
        let (one, _) = fit_joint_baseline(&mdp, &phi, &[&demos[0]], &opts).unwrap();
        let (single, _) = fit_single(&mdp, &phi, &demos[0], &opts).unwrap();
        assert_eq!(one, single);
    }

    #[test]
    fn learned_weights_round_trip() {
        let w = LearnedWeights {
            task_label: "A".into(),
            algorithm: "multitask".into(),
            feature_kind: "one_hot_state".into(),
            lambda: Some(0.1),
            seed: 3,
            theta: vec![0.25, -1.5],
            iterations: 10,
            converged: false,
            final_grad_norm: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        w.write(&path).unwrap();
        assert_eq!(LearnedWeights::read(&path).unwrap(), w);
    }

    #[test]
    fn single_task_fit_on_small_grid_reaches_expert_level() {
        let grid = parse_grid("ddddd\ndgllS\ndgddd\nddlgd\nGdddd").unwrap();
        let (mdp, _) = build_mdp(&grid, &TaskRewardSpec::task_a(), 0.95).unwrap();
        let truth = mdp.reward().unwrap().clone();
        let expert = soft_value_iteration(&mdp, &truth, &planner()).unwrap();
        let demos = sample_trajectories(&mdp, &expert.pi, "A", 200, 1000, 9).unwrap();
        let phi = feature_map(&grid, FeatureKind::OneHotState);
        let (theta, _) = fit_single(&mdp, &phi, &demos, &FitOptions::default()).unwrap();
        let learned = value_iteration(&mdp, &phi.reward(&theta).unwrap(), 1e-10, 100_000).unwrap();
        let pi = greedy_policy(&learned.q).to_stochastic(4);
        let value = policy_value(&mdp, &truth, &pi).unwrap();
        let expert_value = policy_value(&mdp, &truth, &expert.pi).unwrap();
        assert!(value >= 0.95 * expert_value, "learned {value}, expert {expert_value}");

        // Greedy choices agree with the expert's greedy choices on visited states.
        let expert_greedy = greedy_policy(&value_iteration(&mdp, &truth, 1e-10, 100_000).unwrap().q);
        let occ = occupancy(&mdp, &expert.pi, 1e-10).unwrap().state_marginal();
        let learned_greedy = greedy_policy(&learned.q);
        let visited: Vec<usize> = (0..occ.len()).filter(|&s| occ[s] > 0.0).collect();
        let agree = visited
            .iter()
            .filter(|&&s| learned_greedy.action(s) == expert_greedy.action(s))
            .count();
        assert!(agree as f64 >= 0.95 * visited.len() as f64, "{agree}/{}", visited.len());
    }
}
