//! Tabular MDPs, linear feature maps and exact (hard-max) planning.
//!
//! Everything here is used as the ground-truth oracle of the experiments:
//! value iteration for the optimal policy under a known reward and a direct
//! linear solve for the value of an arbitrary stochastic policy.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on probability sums accepted by [`TabularMdp::validate`].
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Residual bound for the linear policy-evaluation solve.
pub const EVAL_RESIDUAL_TOL: f64 = 1e-9;

/// Finite MDP with known dynamics.
///
/// Transition rows are also kept in sparse form (`successors`), since the
/// gridworlds this crate targets have at most a handful of successors per
/// state-action pair.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    transitions: Array3<f64>,
    successors: Vec<Vec<(usize, f64)>>,
    discount: f64,
    initial_dist: Array1<f64>,
    reward: Option<Array2<f64>>,
}

impl TabularMdp {
    /// Builds and validates an MDP. `transitions` is indexed `[s][a][s']`.
    pub fn new(
        transitions: Array3<f64>,
        discount: f64,
        initial_dist: Array1<f64>,
        reward: Option<Array2<f64>>,
    ) -> Result<Self> {
        let (n_states, n_actions, _) = transitions.dim();
        let successors = (0..n_states * n_actions)
            .map(|i| {
                let (s, a) = (i / n_actions, i % n_actions);
                transitions
                    .slice(ndarray::s![s, a, ..])
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(next, &p)| (next, p))
                    .collect()
            })
            .collect();
        let mdp = TabularMdp {
            transitions,
            successors,
            discount,
            initial_dist,
            reward,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks shapes, stochasticity of every transition row and of the
    /// initial distribution, and `0 <= discount < 1`.
    pub fn validate(&self) -> Result<()> {
        let (n_states, n_actions, n_next) = self.transitions.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("MDP needs at least one state and one action".into()));
        }
        if n_next != n_states {
            return Err(Error::Shape(format!(
                "transition tensor is {n_states}x{n_actions}x{n_next}, last axis must equal the state count"
            )));
        }
        if self.initial_dist.len() != n_states {
            return Err(Error::Shape(format!(
                "initial distribution has {} entries for {n_states} states",
                self.initial_dist.len()
            )));
        }
        if let Some(r) = &self.reward {
            if r.dim() != (n_states, n_actions) {
                return Err(Error::Shape(format!(
                    "reward table is {:?}, expected ({n_states}, {n_actions})",
                    r.dim()
                )));
            }
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::DiscountRange(self.discount));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = self.transitions.slice(ndarray::s![s, a, ..]);
                let sum: f64 = row.sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::NonStochasticRow {
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }
        let sum = self.initial_dist.sum();
        if self.initial_dist.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NonStochasticInitial { sum });
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.transitions.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.dim().1
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transitions(&self) -> &Array3<f64> {
        &self.transitions
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    pub fn reward(&self) -> Option<&Array2<f64>> {
        self.reward.as_ref()
    }

    /// Nonzero successors `(s', p)` of the pair `(s, a)`.
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_actions() + a]
    }

    /// Same dynamics with a different reward table.
    pub fn with_reward(&self, reward: Option<Array2<f64>>) -> Result<Self> {
        let mut out = self.clone();
        out.reward = reward;
        out.validate()?;
        Ok(out)
    }

    /// Same dynamics and reward with a different initial distribution.
    pub fn with_initial_dist(&self, initial_dist: Array1<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.initial_dist = initial_dist;
        out.validate()?;
        Ok(out)
    }

    /// `Σ_{s'} T(s, a, s') v(s')`.
    #[inline]
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.successors(s, a).iter().map(|&(n, p)| p * v[n]).sum()
    }

    /// The stored reward, or an error naming the caller.
    pub fn require_reward(&self) -> Result<&Array2<f64>> {
        self.reward
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("MDP has no reward table".into()))
    }

    pub(crate) fn check_table(&self, name: &str, table: &Array2<f64>) -> Result<()> {
        if table.dim() != (self.n_states(), self.n_actions()) {
            return Err(Error::Shape(format!(
                "{name} is {:?}, expected ({}, {})",
                table.dim(),
                self.n_states(),
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// State-to-state matrix `P_π[s][s'] = Σ_a π(a|s) T(s, a, s')`.
    pub fn policy_transition_matrix(&self, policy: &Policy) -> DMatrix<f64> {
        let n = self.n_states();
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions() {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for &(next, t) in self.successors(s, a) {
                    p[(s, next)] += w * t;
                }
            }
        }
        p
    }
}

/// Per state-action feature vectors `φ(s, a) ∈ R^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    table: Array3<f64>,
}

impl FeatureMap {
    /// `table` is indexed `[s][a][k]`; all entries must be finite.
    pub fn new(table: Array3<f64>) -> Result<Self> {
        if table.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("feature table has non-finite entries".into()));
        }
        Ok(FeatureMap { table })
    }

    pub fn dim(&self) -> usize {
        self.table.dim().2
    }

    pub fn table(&self) -> &Array3<f64> {
        &self.table
    }

    pub fn get(&self, s: usize, a: usize) -> ArrayView1<'_, f64> {
        self.table.slice(ndarray::s![s, a, ..])
    }

    pub fn check_mdp(&self, mdp: &TabularMdp) -> Result<()> {
        let (s, a, _) = self.table.dim();
        if (s, a) != (mdp.n_states(), mdp.n_actions()) {
            return Err(Error::Shape(format!(
                "feature map covers ({s}, {a}) pairs, MDP has ({}, {})",
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    /// Linear reward `R(s, a) = θ · φ(s, a)`.
    pub fn reward(&self, theta: &Array1<f64>) -> Result<Array2<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::Shape(format!(
                "weight vector has length {}, feature dimension is {}",
                theta.len(),
                self.dim()
            )));
        }
        let (s, a, k) = self.table.dim();
        let flat = self
            .table
            .view()
            .into_shape_with_order((s * a, k))
            .expect("contiguous feature table");
        Ok(flat.dot(theta).into_shape_with_order((s, a)).expect("reshape reward"))
    }
}

/// Stochastic policy table `π[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy(Array2<f64>);

impl Policy {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        for (s, row) in table.axis_iter(Axis(0)).enumerate() {
            let sum = row.sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidArgument(format!(
                    "policy row {s} is not a distribution (sum = {sum})"
                )));
            }
        }
        Ok(Policy(table))
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy(Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64))
    }

    pub(crate) fn from_table_unchecked(table: Array2<f64>) -> Self {
        Policy(table)
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.0[[s, a]]
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n_states(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, s: usize) -> ArrayView1<'_, f64> {
        self.0.row(s)
    }
}

/// One action per state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicPolicy(pub Vec<usize>);

impl DeterministicPolicy {
    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }

    pub fn to_stochastic(&self, n_actions: usize) -> Policy {
        let mut table = Array2::zeros((self.0.len(), n_actions));
        for (s, &a) in self.0.iter().enumerate() {
            table[[s, a]] = 1.0;
        }
        Policy(table)
    }
}

#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub values: Array1<f64>,
    pub q: Array2<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Optimal values by Bellman-optimality iteration.
///
/// Stops once `‖BV − V‖∞ ≤ tol`; the returned `V` is the final backup, so
/// its own residual is at most `γ·tol`. `Q*(s,a) = R(s,a) + γ Σ T V*` is
/// computed from the returned values.
pub fn value_iteration(mdp: &TabularMdp, reward: &Array2<f64>, tol: f64, max_iter: usize) -> Result<ValueSolution> {
    mdp.check_table("reward", reward)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iter {
        residual = 0.0;
        for s in 0..n {
            let best = (0..m)
                .map(|a| reward[[s, a]] + gamma * mdp.expected_next(s, a, &v))
                .fold(f64::NEG_INFINITY, f64::max);
            residual = f64::max(residual, (best - v[s]).abs());
            next[s] = best;
        }
        std::mem::swap(&mut v, &mut next);
        if residual <= tol {
            let q = Array2::from_shape_fn((n, m), |(s, a)| reward[[s, a]] + gamma * mdp.expected_next(s, a, &v));
            return Ok(ValueSolution {
                values: Array1::from(v),
                q,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "value iteration",
        iterations: max_iter,
        residual,
    })
}

/// `argmax_a Q(s, a)` per state, ties to the lowest action index.
pub fn greedy_policy(q: &Array2<f64>) -> DeterministicPolicy {
    DeterministicPolicy(
        q.axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (a, &x) in row.iter().enumerate().skip(1) {
                    if x > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect(),
    )
}

/// Per-state values `v = (I − γ P_π)^{-1} r_π` of a stochastic policy.
pub fn policy_state_values(mdp: &TabularMdp, reward: &Array2<f64>, policy: &Policy) -> Result<Array1<f64>> {
    mdp.check_table("reward", reward)?;
    if policy.table().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::Shape("policy table does not match the MDP".into()));
    }
    let n = mdp.n_states();
    let gamma = mdp.discount();
    let p = mdp.policy_transition_matrix(policy);
    let r = DVector::from_iterator(
        n,
        (0..n).map(|s| (0..mdp.n_actions()).map(|a| policy.prob(s, a) * reward[[s, a]]).sum()),
    );
    let a = DMatrix::identity(n, n) - p * gamma;
    let v = solve(&a, &r, "policy evaluation")?;
    Ok(Array1::from_iter(v.iter().copied()))
}

/// Expected discounted return `E[Σ γ^t R(s_t, a_t)]` from the initial
/// distribution, by direct linear solve.
pub fn policy_value(mdp: &TabularMdp, reward: &Array2<f64>, policy: &Policy) -> Result<f64> {
    let v = policy_state_values(mdp, reward, policy)?;
    Ok(mdp.initial_dist().dot(&v))
}

/// Undiscounted expected return `E[Σ_{t<steps} R(s_t, a_t)]` from the initial
/// distribution, by propagating the state distribution forward.
pub fn finite_horizon_return(mdp: &TabularMdp, reward: &Array2<f64>, policy: &Policy, steps: usize) -> Result<f64> {
    mdp.check_table("reward", reward)?;
    if policy.table().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::Shape("policy table does not match the MDP".into()));
    }
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut dist = mdp.initial_dist().to_vec();
    let mut total = 0.0;
    for _ in 0..steps {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..m {
                let w = dist[s] * policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                total += w * reward[[s, a]];
                for &(t, p) in mdp.successors(s, a) {
                    next[t] += w * p;
                }
            }
        }
        dist = next;
    }
    Ok(total)
}

/// LU solve with a residual check against [`EVAL_RESIDUAL_TOL`], scaled by
/// the right-hand side magnitude when that exceeds one.
pub(crate) fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let x = a.clone().lu().solve(b).ok_or(Error::Singular(what))?;
    let residual = (a * &x - b).amax();
    let scale = b.amax().max(1.0);
    if !(residual <= EVAL_RESIDUAL_TOL * scale) {
        return Err(Error::NonConvergence {
            what,
            iterations: 1,
            residual,
        });
    }
    Ok(x)
}
