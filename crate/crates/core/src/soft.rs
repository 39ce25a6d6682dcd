//! Maximum causal entropy planning.
//!
//! Soft value iteration solves
//!
//! ```text
//! Q(s,a) = R(s,a) + γ Σ_{s'} T(s,a,s') V(s')
//! V(s)   = log Σ_a exp Q(s,a)
//! ```
//!
//! and the expert model is `π(a|s) = exp(Q(s,a) − V(s))`. Occupancy
//! measures, feature expectations and discounted causal entropy are computed
//! exactly from the model.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::demos::Trajectory;
use crate::error::{Error, Result};
use crate::mdp::{self, FeatureMap, Policy, TabularMdp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerOptions {
    /// Stop once a backup changes `V` by at most `tol` in sup norm.
    pub tol: f64,
    /// Backups allowed, counting policy-evaluation steps.
    pub max_iter: usize,
    /// Soft policy-evaluation steps allowed before plain backups take over;
    /// `0` gives pure fixed-point iteration.
    pub policy_steps: usize,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            tol: 1e-10,
            max_iter: 100_000,
            policy_steps: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoftPolicy {
    pub pi: Policy,
    pub q_soft: Array2<f64>,
    pub v_soft: Array1<f64>,
    /// Sup-norm change of `V` on the final sweep.
    pub residual: f64,
    pub iterations: usize,
}

/// `max + log Σ exp(x − max)`.
#[inline]
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn soft_value_iteration(mdp: &TabularMdp, reward: &Array2<f64>, opts: &PlannerOptions) -> Result<SoftPolicy> {
    soft_value_iteration_from(mdp, reward, None, opts)
}

/// Soft value iteration started from `init` instead of zero.
///
/// The fixed point is unique for `γ < 1`, so the start only affects the
/// iteration count. Each iteration applies the soft backup to `V`; while
/// `policy_steps` remain and the residual keeps shrinking, `V` is then
/// replaced by the exact soft value of the backup's policy (a Newton step on
/// the soft Bellman equation) rather than by the backup itself. Termination
/// is always decided by a plain backup: the returned `Q` is the backup of the
/// last iterate, its residual is at most `tol`, and `V = logsumexp(Q)`
/// exactly, which makes `π` normalized to rounding.
pub fn soft_value_iteration_from(
    mdp: &TabularMdp,
    reward: &Array2<f64>,
    init: Option<&Array1<f64>>,
    opts: &PlannerOptions,
) -> Result<SoftPolicy> {
    mdp.check_table("reward", reward)?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let mut v = match init {
        Some(v0) if v0.len() == n => v0.to_vec(),
        Some(v0) => {
            return Err(Error::Shape(format!(
                "warm start has {} entries for {n} states",
                v0.len()
            )))
        }
        None => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let mut q = Array2::<f64>::zeros((n, m));
    let mut row = vec![0.0; m];
    let mut residual = f64::INFINITY;
    let mut policy_steps = opts.policy_steps;
    let mut last_policy_residual = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        residual = 0.0;
        for s in 0..n {
            for (a, slot) in row.iter_mut().enumerate() {
                *slot = reward[[s, a]] + gamma * mdp.expected_next(s, a, &v);
            }
            let lse = log_sum_exp(&row);
            residual = f64::max(residual, (lse - v[s]).abs());
            next[s] = lse;
            q.row_mut(s).assign(&ndarray::ArrayView1::from(&row[..]));
        }
        if residual <= opts.tol {
            let v_soft = Array1::from(next);
            let pi = Array2::from_shape_fn((n, m), |(s, a)| (q[[s, a]] - v_soft[s]).exp());
            return Ok(SoftPolicy {
                pi: Policy::from_table_unchecked(pi),
                q_soft: q,
                v_soft,
                residual,
                iterations: iteration,
            });
        }
        if policy_steps > 0 && residual < last_policy_residual {
            policy_steps -= 1;
            last_policy_residual = residual;
            match soft_policy_values(mdp, reward, &q, &next) {
                Ok(values) => {
                    v = values;
                    continue;
                }
                Err(_) => policy_steps = 0,
            }
        } else {
            policy_steps = 0;
        }
        std::mem::swap(&mut v, &mut next);
    }
    Err(Error::NonConvergence {
        what: "soft value iteration",
        iterations: opts.max_iter,
        residual,
    })
}

/// Exact soft value `(I − γ P_π)^{-1} Σ_a π(a|·)(R − log π(a|·))` of the
/// policy `π = exp(Q − V)`.
fn soft_policy_values(mdp: &TabularMdp, reward: &Array2<f64>, q: &Array2<f64>, v: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let log_pi = Array2::from_shape_fn((n, m), |(s, a)| q[[s, a]] - v[s]);
    let pi = Policy::from_table_unchecked(log_pi.mapv(f64::exp));
    let b = DVector::from_iterator(
        n,
        (0..n).map(|s| (0..m).map(|a| pi.prob(s, a) * (reward[[s, a]] - log_pi[[s, a]])).sum()),
    );
    let a = DMatrix::identity(n, n) - mdp.policy_transition_matrix(&pi) * mdp.discount();
    let values = mdp::solve(&a, &b, "soft policy evaluation")?;
    Ok(values.iter().copied().collect())
}

/// Discounted state-action visitation `ρ(s,a) = Σ_t γ^t P(s_t = s, a_t = a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub rho: Array2<f64>,
}

impl Occupancy {
    pub fn total(&self) -> f64 {
        self.rho.sum()
    }

    /// `Σ_a ρ(s, a)`.
    pub fn state_marginal(&self) -> Array1<f64> {
        self.rho.sum_axis(ndarray::Axis(1))
    }
}

/// Largest violation of `ρ(s,a) = π(a|s)[μ0(s) + γ Σ ρ(s̃,ã) T(s̃,ã,s)]`.
pub fn occupancy_residual(mdp: &TabularMdp, policy: &Policy, rho: &Array2<f64>) -> f64 {
    let inflow = occupancy_inflow(mdp, rho);
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            worst = worst.max((rho[[s, a]] - policy.prob(s, a) * inflow[s]).abs());
        }
    }
    worst
}

/// `μ0(s) + γ Σ_{s̃,ã} ρ(s̃,ã) T(s̃,ã,s)`.
fn occupancy_inflow(mdp: &TabularMdp, rho: &Array2<f64>) -> Vec<f64> {
    let gamma = mdp.discount();
    let mut inflow: Vec<f64> = mdp.initial_dist().to_vec();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let mass = gamma * rho[[s, a]];
            if mass == 0.0 {
                continue;
            }
            for &(next, p) in mdp.successors(s, a) {
                inflow[next] += mass * p;
            }
        }
    }
    inflow
}

/// Exact occupancy measure of `policy` from the MDP's initial distribution.
///
/// Solves `(I − γ P_πᵀ) d = μ0` for the state marginal `d` and sets
/// `ρ(s,a) = π(a|s) d(s)`. If the solve leaves a residual above `tol`, the
/// fixed-point map is iterated from the solution until it does not.
pub fn occupancy(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Result<Occupancy> {
    occupancy_with(mdp, policy, tol, PlannerOptions::default().max_iter)
}

pub fn occupancy_with(mdp: &TabularMdp, policy: &Policy, tol: f64, max_iter: usize) -> Result<Occupancy> {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    if policy.table().dim() != (n, m) {
        return Err(Error::Shape("policy table does not match the MDP".into()));
    }
    let p = mdp.policy_transition_matrix(policy);
    let a = DMatrix::identity(n, n) - p.transpose() * mdp.discount();
    let mu = DVector::from_iterator(n, mdp.initial_dist().iter().copied());
    let d = mdp::solve(&a, &mu, "occupancy")?;
    let mut rho = Array2::from_shape_fn((n, m), |(s, a)| policy.prob(s, a) * d[s]);
    let mut residual = occupancy_residual(mdp, policy, &rho);
    let mut iterations = 0;
    while residual > tol {
        if iterations == max_iter {
            return Err(Error::NonConvergence {
                what: "occupancy",
                iterations,
                residual,
            });
        }
        let inflow = occupancy_inflow(mdp, &rho);
        rho = Array2::from_shape_fn((n, m), |(s, a)| policy.prob(s, a) * inflow[s]);
        residual = occupancy_residual(mdp, policy, &rho);
        iterations += 1;
    }
    Ok(Occupancy { rho })
}

/// `F = Σ_{s,a} ρ(s,a) φ(s,a)`.
pub fn feature_expectations(occ: &Occupancy, features: &FeatureMap) -> Result<Array1<f64>> {
    let (n, m) = occ.rho.dim();
    let (fs, fa, k) = features.table().dim();
    if (fs, fa) != (n, m) {
        return Err(Error::Shape(format!(
            "occupancy is ({n}, {m}), features cover ({fs}, {fa})"
        )));
    }
    let flat = features
        .table()
        .view()
        .into_shape_with_order((n * m, k))
        .expect("contiguous feature table");
    let rho = occ
        .rho
        .view()
        .into_shape_with_order(n * m)
        .expect("contiguous occupancy");
    Ok(flat.t().dot(&rho))
}

fn check_traj(policy: &Policy, traj: &Trajectory) -> Result<()> {
    for &(s, a) in traj.steps() {
        if s >= policy.n_states() || a >= policy.n_actions() {
            return Err(Error::Shape(format!("trajectory step ({s}, {a}) out of range")));
        }
    }
    Ok(())
}

/// `Σ_t log π(a_t | s_t)`; `-inf` if the trajectory takes a zero-probability
/// action.
pub fn trajectory_log_likelihood(policy: &Policy, traj: &Trajectory) -> Result<f64> {
    check_traj(policy, traj)?;
    Ok(traj.steps().iter().map(|&(s, a)| policy.prob(s, a).ln()).sum())
}

/// `Σ_t γ^t log π(a_t | s_t)`.
pub fn discounted_log_likelihood(policy: &Policy, traj: &Trajectory, discount: f64) -> Result<f64> {
    check_traj(policy, traj)?;
    let mut weight = 1.0;
    let mut total = 0.0;
    for &(s, a) in traj.steps() {
        total += weight * policy.prob(s, a).ln();
        weight *= discount;
    }
    Ok(total)
}

/// Discounted causal entropy `Σ_{s,a} ρ(s,a) (−log π(a|s))`, with
/// `0 log 0 = 0`.
pub fn causal_entropy(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Result<f64> {
    let occ = occupancy(mdp, policy, tol)?;
    Ok(occ
        .rho
        .indexed_iter()
        .map(|((s, a), &r)| {
            let p = policy.prob(s, a);
            if p > 0.0 {
                -r * p.ln()
            } else {
                0.0
            }
        })
        .sum())
}
