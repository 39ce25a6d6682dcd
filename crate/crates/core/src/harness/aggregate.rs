//! Summaries over seeds of result rows grouped by
//! `(algorithm, target, m, lambda)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::results::ResultRow;
use crate::error::{Error, Result};

/// Normal-approximation 95% quantile.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Maximum value over seeds.
    BestOfSeeds,
    /// Mean with a `1.96·s/√n` half-width, `s` the sample standard
    /// deviation. A single seed gives a zero-width interval.
    MeanCi95,
}

impl fmt::Display for AggregateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregateMode::BestOfSeeds => "best_of_seeds",
            AggregateMode::MeanCi95 => "mean_ci95",
        })
    }
}

impl FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best_of_seeds" => Ok(AggregateMode::BestOfSeeds),
            "mean_ci95" => Ok(AggregateMode::MeanCi95),
            _ => Err(Error::InvalidArgument(format!("unknown aggregation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub target: String,
    pub m: Option<usize>,
    pub lambda: Option<f64>,
    pub mode: String,
    /// Successful rows in the group.
    pub n: usize,
    /// Failed rows in the group.
    pub failed: usize,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub oracle: f64,
    pub expert: f64,
}

type GroupKey = (String, String, Option<usize>, Option<u64>);

/// Groups rows by `(algorithm, target, m, lambda)` and summarizes each group
/// over its successful rows. The output is sorted by group key and does not
/// depend on the order of `rows`.
pub fn aggregate(rows: &[ResultRow], mode: AggregateMode) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no result rows to aggregate".into()));
    }
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        let key = (
            row.algorithm.clone(),
            row.target.clone(),
            row.m,
            row.lambda.map(f64::to_bits),
        );
        groups.entry(key).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|((algorithm, target, m, lambda), group)| {
            let mut values: Vec<f64> = group.iter().filter(|r| r.is_ok()).filter_map(|r| r.value).collect();
            let failed = group.len() - values.len();
            if values.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "group ({algorithm}, {target}, m={m:?}, lambda={:?}) has no successful rows",
                    lambda.map(f64::from_bits)
                )));
            }
            values.sort_by(f64::total_cmp);
            let (value, ci) = match mode {
                AggregateMode::BestOfSeeds => (*values.last().expect("non-empty"), None),
                AggregateMode::MeanCi95 => {
                    let (mean, half) = mean_ci95(&values);
                    (mean, Some((mean - half, mean + half)))
                }
            };
            let first = group[0];
            Ok(SummaryRow {
                algorithm,
                target,
                m,
                lambda: lambda.map(f64::from_bits),
                mode: mode.to_string(),
                n: values.len(),
                failed,
                value,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
                oracle: first.oracle,
                expert: first.expert,
            })
        })
        .collect()
}

/// Mean and 95% half-width `1.96·s/√n` (sample standard deviation; zero for
/// a single value).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z_95 * var.sqrt() / n.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::results::{STATUS_FAILED, STATUS_OK};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn row(alg: &str, m: usize, seed: u64, value: Option<f64>) -> ResultRow {
        ResultRow {
            algorithm: alg.into(),
            target: "A".into(),
            m: Some(m),
            lambda: None,
            seed: Some(seed),
            value,
            oracle: 10.0,
            expert: 9.0,
            iterations: None,
            converged: None,
            status: if value.is_some() { STATUS_OK } else { STATUS_FAILED }.into(),
            message: String::new(),
        }
    }

    #[test]
    fn best_of_picks_the_maximum() {
        let rows: Vec<ResultRow> = [-1.0, 2.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| row("single", 1, i as u64, Some(v)))
            .collect();
        let s = aggregate(&rows, AggregateMode::BestOfSeeds).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].value, 2.0);
        assert_eq!((s[0].ci_low, s[0].ci_high), (None, None));
    }

    #[test]
    fn single_seed_has_zero_width_interval() {
        let s = aggregate(&[row("single", 1, 0, Some(3.5))], AggregateMode::MeanCi95).unwrap();
        assert_eq!((s[0].value, s[0].ci_low, s[0].ci_high), (3.5, Some(3.5), Some(3.5)));
    }

    #[test]
    fn interval_of_five_values_matches_hand_calculation() {
        // mean 3, squared deviations 4+1+0+1+4 = 10, s² = 10/4, s = 1.5811388300841898
        let rows: Vec<ResultRow> = [1.0, 2.0, 3.0, 4.0, 5.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| row("multitask", 2, i as u64, Some(v)))
            .collect();
        let s = aggregate(&rows, AggregateMode::MeanCi95).unwrap();
        let half = 1.96 * 1.5811388300841898 / 5f64.sqrt();
        assert_abs_diff_eq!(s[0].value, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[0].ci_low.unwrap(), 3.0 - half, epsilon = 1e-12);
        assert_abs_diff_eq!(s[0].ci_high.unwrap(), 3.0 + half, epsilon = 1e-12);
        assert_abs_diff_eq!(half, 1.3859292911256331, epsilon = 1e-12);
    }

    #[test]
    fn failures_are_counted_and_all_failed_groups_rejected() {
        let rows = vec![row("single", 1, 0, Some(1.0)), row("single", 1, 1, None)];
        let s = aggregate(&rows, AggregateMode::MeanCi95).unwrap();
        assert_eq!((s[0].n, s[0].failed, s[0].value), (1, 1, 1.0));
        assert!(aggregate(&[row("single", 1, 1, None)], AggregateMode::BestOfSeeds).is_err());
        assert!(aggregate(&[], AggregateMode::BestOfSeeds).is_err());
    }

    #[test]
    fn groups_are_split_by_key() {
        let rows = vec![
            row("single", 1, 0, Some(1.0)),
            row("single", 2, 0, Some(2.0)),
            row("joint", 1, 0, Some(3.0)),
        ];
        let s = aggregate(&rows, AggregateMode::BestOfSeeds).unwrap();
        let keys: Vec<(String, Option<usize>)> = s.iter().map(|r| (r.algorithm.clone(), r.m)).collect();
        assert_eq!(
            keys,
            [
                ("joint".to_string(), Some(1)),
                ("single".to_string(), Some(1)),
                ("single".to_string(), Some(2))
            ]
        );
    }

    proptest! {
        #[test]
        fn aggregation_commutes_with_permutation(
            values in prop::collection::vec(-100.0f64..100.0, 1..12),
            rotate in 0usize..12,
        ) {
            let rows: Vec<ResultRow> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| row(if i % 2 == 0 { "a" } else { "b" }, 1 + i % 3, i as u64, Some(v)))
                .collect();
            let mut shuffled = rows.clone();
            shuffled.rotate_left(rotate % rows.len());
            shuffled.reverse();
            for mode in [AggregateMode::BestOfSeeds, AggregateMode::MeanCi95] {
                prop_assert_eq!(aggregate(&rows, mode).unwrap(), aggregate(&shuffled, mode).unwrap());
            }
        }
    }
}
