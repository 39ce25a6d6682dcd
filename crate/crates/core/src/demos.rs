//! Expert demonstrations: sampling, empirical discounted feature counts and
//! the on-disk format.
//!
//! # File format
//!
//! ```text
//! # mtirl demos v1
//! task_label A
//! horizon 200
//! seed 42
//! n 2
//! rng ChaCha8Rng
//! 3,0 4,3 5,1 ...
//! 7,2 7,2 8,0 ...
//! ```
//!
//! The header is the magic line plus five `key value` lines in that order.
//! Each following line is one trajectory: whitespace-separated `state,action`
//! pairs, `horizon + 1` of them. Labels may not contain whitespace.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{FeatureMap, Policy, TabularMdp};

/// Generator used for every random draw in the crate.
pub type DemoRng = ChaCha8Rng;

/// Recorded in file headers and run metadata.
pub const RNG_ID: &str = "ChaCha8Rng";

const MAGIC: &str = "# mtirl demos v1";

/// `(s_0, a_0), …, (s_T, a_T)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("trajectory must have at least one step".into()));
        }
        Ok(Trajectory { steps })
    }

    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoSet {
    pub task_label: String,
    pub trajectories: Vec<Trajectory>,
    pub horizon: usize,
    pub seed: u64,
}

/// Index of the first cumulative weight exceeding a uniform draw. Falls back
/// to the last positive entry when rounding leaves the total just under one.
pub(crate) fn sample_index<R: Rng>(rng: &mut R, probs: impl IntoIterator<Item = f64> + Clone) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// `n` rollouts of `horizon + 1` steps from `μ0` under `policy`,
/// deterministic in `seed`.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    policy: &Policy,
    task_label: &str,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<DemoSet> {
    if horizon == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "horizon and trajectory count must be positive".into(),
        ));
    }
    if policy.table().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::Shape("policy table does not match the MDP".into()));
    }
    check_label(task_label)?;
    let mut rng = DemoRng::seed_from_u64(seed);
    let mu = mdp.initial_dist();
    let trajectories = (0..n)
        .map(|_| {
            let mut s = sample_index(&mut rng, mu.iter().copied());
            let mut steps = Vec::with_capacity(horizon + 1);
            for t in 0..=horizon {
                let a = sample_index(&mut rng, policy.row(s).iter().copied());
                steps.push((s, a));
                if t < horizon {
                    let succ = mdp.successors(s, a);
                    s = succ[sample_index(&mut rng, succ.iter().map(|&(_, p)| p))].0;
                }
            }
            Trajectory { steps }
        })
        .collect();
    Ok(DemoSet {
        task_label: task_label.to_string(),
        trajectories,
        horizon,
        seed,
    })
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.chars().any(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!(
            "task label {label:?} must be non-empty without whitespace"
        )));
    }
    Ok(())
}

/// Undiscounted return `Σ_t R(s_t, a_t)` of every trajectory.
pub fn trajectory_returns(demos: &DemoSet, reward: &Array2<f64>) -> Result<Vec<f64>> {
    let (n, m) = reward.dim();
    demos
        .trajectories
        .iter()
        .map(|traj| {
            traj.steps()
                .iter()
                .map(|&(s, a)| {
                    if s >= n || a >= m {
                        Err(Error::Shape(format!("step ({s}, {a}) outside a {n}x{m} reward table")))
                    } else {
                        Ok(reward[[s, a]])
                    }
                })
                .sum()
        })
        .collect()
}

/// `(1/N) Σ_j Σ_t γ^t φ(s_t, a_t)`.
pub fn empirical_feature_counts(demos: &DemoSet, features: &FeatureMap, discount: f64) -> Result<Array1<f64>> {
    if demos.trajectories.is_empty() {
        return Err(Error::EmptyDemos);
    }
    let (n_states, n_actions, k) = features.table().dim();
    let mut total = Array1::<f64>::zeros(k);
    for traj in &demos.trajectories {
        let mut w = 1.0;
        for &(s, a) in traj.steps() {
            if s >= n_states || a >= n_actions {
                return Err(Error::Shape(format!("demo step ({s}, {a}) outside the feature map")));
            }
            total.scaled_add(w, &features.get(s, a));
            w *= discount;
        }
    }
    Ok(total / demos.trajectories.len() as f64)
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// First `n` trajectories under the same header.
    pub fn truncated(&self, n: usize) -> DemoSet {
        DemoSet {
            trajectories: self.trajectories[..n.min(self.len())].to_vec(),
            ..self.clone()
        }
    }

    /// All trajectories of `sets`, in order. Horizons must agree.
    pub fn concat(label: &str, sets: &[&DemoSet]) -> Result<DemoSet> {
        check_label(label)?;
        let horizon = sets.first().map(|d| d.horizon).ok_or(Error::EmptyDemos)?;
        if sets.iter().any(|d| d.horizon != horizon) {
            return Err(Error::InvalidArgument(
                "cannot concatenate demos with different horizons".into(),
            ));
        }
        Ok(DemoSet {
            task_label: label.to_string(),
            trajectories: sets.iter().flat_map(|d| d.trajectories.iter().cloned()).collect(),
            horizon,
            seed: sets[0].seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_label(&self.task_label)?;
        if self.trajectories.iter().any(|t| t.len() != self.horizon + 1) {
            return Err(Error::InvalidArgument(format!(
                "every trajectory must have horizon + 1 = {} steps",
                self.horizon + 1
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "task_label {}", self.task_label).unwrap();
        writeln!(out, "horizon {}", self.horizon).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "n {}", self.len()).unwrap();
        writeln!(out, "rng {RNG_ID}").unwrap();
        for traj in &self.trajectories {
            let mut first = true;
            for &(s, a) in traj.steps() {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{s},{a}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`DemoSet::to_text`] output. `origin` names the source in errors.
    pub fn from_text(text: &str, origin: &str) -> Result<DemoSet> {
        let err = |line: usize, msg: String| Error::Format {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, format!("expected {MAGIC:?}"))),
        }
        let mut header = |key: &str| -> Result<String> {
            let (no, line) = lines.next().ok_or_else(|| err(0, format!("missing {key} header")))?;
            let value = line
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .ok_or_else(|| err(no, format!("expected `{key} <value>`")))?;
            Ok(value.to_string())
        };
        let task_label = header("task_label")?;
        let horizon: usize = header("horizon")?
            .parse()
            .map_err(|e| err(3, format!("horizon: {e}")))?;
        let seed: u64 = header("seed")?.parse().map_err(|e| err(4, format!("seed: {e}")))?;
        let n: usize = header("n")?.parse().map_err(|e| err(5, format!("n: {e}")))?;
        let rng = header("rng")?;
        if rng != RNG_ID {
            return Err(err(
                6,
                format!("demos were generated with {rng}, this build uses {RNG_ID}"),
            ));
        }
        let mut trajectories = Vec::with_capacity(n);
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let steps = line
                .split_whitespace()
                .map(|pair| {
                    let (s, a) = pair
                        .split_once(',')
                        .ok_or_else(|| err(no, format!("bad pair {pair:?}")))?;
                    let s = s.parse().map_err(|e| err(no, format!("state: {e}")))?;
                    let a = a.parse().map_err(|e| err(no, format!("action: {e}")))?;
                    Ok((s, a))
                })
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory::new(steps).map_err(|e| err(no, e.to_string()))?);
        }
        if trajectories.len() != n {
            return Err(err(
                0,
                format!("header says {n} trajectories, found {}", trajectories.len()),
            ));
        }
        let set = DemoSet {
            task_label,
            trajectories,
            horizon,
            seed,
        };
        set.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DemoSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DemoSet::from_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soft::{feature_expectations, occupancy, soft_value_iteration, PlannerOptions};
    use crate::testutil::{random_mdp, random_reward};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn chain_mdp() -> TabularMdp {
        // Deterministic 3-cycle.
        let mut t = Array3::zeros((3, 2, 3));
        for s in 0..3 {
            t[[s, 0, (s + 1) % 3]] = 1.0;
            t[[s, 1, s]] = 1.0;
        }
        TabularMdp::new(t, 0.9, array![1.0, 0.0, 0.0], None).unwrap()
    }

    fn one_hot(n: usize, m: usize) -> FeatureMap {
        FeatureMap::new(Array3::from_shape_fn((n, m, n), |(s, _, k)| f64::from(s == k))).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let pi = Policy::uniform(4, 3);
        let a = sample_trajectories(&mdp, &pi, "x", 20, 10, 7).unwrap();
        let b = sample_trajectories(&mdp, &pi, "x", 20, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
        let c = sample_trajectories(&mdp, &pi, "x", 20, 10, 8).unwrap();
        assert_ne!(a, c);
        assert!(a.trajectories.iter().all(|t| t.len() == 21));
    }

    #[test]
    fn deterministic_everything_gives_identical_trajectories() {
        let mdp = chain_mdp();
        let pi = crate::mdp::DeterministicPolicy(vec![0, 0, 1]).to_stochastic(2);
        let d = sample_trajectories(&mdp, &pi, "cycle", 6, 5, 3).unwrap();
        for t in &d.trajectories {
            assert_eq!(t.steps(), &[(0, 0), (1, 0), (2, 1), (2, 1), (2, 1), (2, 1), (2, 1)]);
        }
    }

    #[test]
    fn action_frequencies_concentrate() {
        let mdp = chain_mdp();
        let pi = Policy::new(array![[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]]).unwrap();
        let d = sample_trajectories(&mdp, &pi, "freq", 99, 2500, 11).unwrap();
        let (mut visits, mut first) = (0usize, 0usize);
        for t in &d.trajectories {
            for &(s, a) in t.steps() {
                if s == 0 {
                    visits += 1;
                    first += usize::from(a == 0);
                }
            }
        }
        assert!(visits >= 100_000, "only {visits} visits");
        let p = 0.3;
        let sigma = (p * (1.0 - p) / visits as f64).sqrt();
        let freq = first as f64 / visits as f64;
        assert!((freq - p).abs() <= 3.0 * sigma, "freq {freq}, sigma {sigma}");
    }

    #[test]
    fn pinned_state_geometric_count() {
        let mdp = chain_mdp();
        let stay = crate::mdp::DeterministicPolicy(vec![1, 1, 1]).to_stochastic(2);
        let h = 15;
        let d = sample_trajectories(&mdp, &stay, "pin", h, 1, 0).unwrap();
        let f = empirical_feature_counts(&d, &one_hot(3, 2), 0.9).unwrap();
        assert_abs_diff_eq!(f[0], (1.0 - 0.9f64.powi(h as i32 + 1)) / 0.1, epsilon = 1e-12);
        assert_eq!(f[1], 0.0);

        let copies = DemoSet::concat("pin", &[&d, &d, &d]).unwrap();
        assert_eq!(empirical_feature_counts(&copies, &one_hot(3, 2), 0.9).unwrap(), f);
    }

    #[test]
    fn returns_sum_rewards_along_each_trajectory() {
        let d = DemoSet {
            task_label: "r".into(),
            trajectories: vec![
                Trajectory::new(vec![(0, 1), (2, 0)]).unwrap(),
                Trajectory::new(vec![(1, 1), (1, 1)]).unwrap(),
            ],
            horizon: 1,
            seed: 0,
        };
        let r = ndarray::array![[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]];
        assert_eq!(trajectory_returns(&d, &r).unwrap(), vec![2.5, -8.0]);
        assert!(matches!(
            trajectory_returns(&d, &r.slice(ndarray::s![..2, ..]).to_owned()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn empty_demos_rejected() {
        let d = DemoSet {
            task_label: "e".into(),
            trajectories: vec![],
            horizon: 3,
            seed: 0,
        };
        assert!(matches!(
            empirical_feature_counts(&d, &one_hot(3, 2), 0.9),
            Err(Error::EmptyDemos)
        ));
    }

    #[test]
    fn empirical_counts_converge_to_exact_expectations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mdp = random_mdp(&mut rng, 5, 3, 0.9);
        let sp = soft_value_iteration(&mdp, &random_reward(&mut rng, 5, 3), &PlannerOptions::default()).unwrap();
        let phi = one_hot(5, 3);
        let horizon = 132; // 0.9^132 < 1e-6
        let d = sample_trajectories(&mdp, &sp.pi, "lln", horizon, 10_000, 1).unwrap();
        let emp = empirical_feature_counts(&d, &phi, 0.9).unwrap();
        let exact = feature_expectations(&occupancy(&mdp, &sp.pi, 1e-10).unwrap(), &phi).unwrap();
        for k in 0..5 {
            assert!(
                (emp[k] - exact[k]).abs() <= 0.02 * exact[k],
                "k={k}: {} vs {}",
                emp[k],
                exact[k]
            );
        }
    }

    #[test]
    fn text_format_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let d = sample_trajectories(&mdp, &Policy::uniform(4, 3), "task_A", 5, 3, 99).unwrap();
        let text = d.to_text();
        assert!(text.starts_with("# mtirl demos v1\ntask_label task_A\nhorizon 5\nseed 99\nn 3\nrng ChaCha8Rng\n"));
        assert_eq!(DemoSet::from_text(&text, "mem").unwrap(), d);
        let bad = text.replace("n 3", "n 4");
        assert!(matches!(DemoSet::from_text(&bad, "mem"), Err(Error::Format { .. })));
        let bad = text.replacen(',', ";", 1);
        assert!(matches!(DemoSet::from_text(&bad, "mem"), Err(Error::Format { .. })));
        assert!(sample_trajectories(&mdp, &Policy::uniform(4, 3), "has space", 5, 3, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn counts_permutation_invariant_and_concat_weighted(seed in any::<u64>(), n1 in 1usize..6, n2 in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(&mut rng, 4, 2, 0.8);
            let pi = Policy::uniform(4, 2);
            let phi = one_hot(4, 2);
            let a = sample_trajectories(&mdp, &pi, "a", 8, n1, seed).unwrap();
            let b = sample_trajectories(&mdp, &pi, "b", 8, n2, seed.wrapping_add(1)).unwrap();
            let fa = empirical_feature_counts(&a, &phi, 0.8).unwrap();
            let fb = empirical_feature_counts(&b, &phi, 0.8).unwrap();
            let ab = DemoSet::concat("ab", &[&a, &b]).unwrap();
            let ba = DemoSet::concat("ba", &[&b, &a]).unwrap();
            let fab = empirical_feature_counts(&ab, &phi, 0.8).unwrap();
            let fba = empirical_feature_counts(&ba, &phi, 0.8).unwrap();
            let weighted = (&fa * n1 as f64 + &fb * n2 as f64) / (n1 + n2) as f64;
            for k in 0..4 {
                prop_assert!((fab[k] - fba[k]).abs() < 1e-12);
                prop_assert!((fab[k] - weighted[k]).abs() < 1e-12);
            }
            prop_assert_eq!(DemoSet::from_text(&ab.to_text(), "p").unwrap(), ab);
        }
    }
}
