//! Mann-Whitney U tests, Bonferroni correction and distribution summaries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample '{0}' is empty")]
    Empty(String),
    #[error("sample '{label}' has a non-finite value at index {index}")]
    NonFinite { label: String, index: usize },
    #[error("need at least 3 values per side, got {x} and {y}")]
    TooSmall { x: usize, y: usize },
    #[error("comparison count must be at least 1")]
    Comparisons,
    #[error("unknown alternative '{0}'")]
    Alternative(String),
}

/// A labelled, non-empty set of finite observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub label: String,
    values: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self, StatsError> {
        let label = label.into();
        if values.is_empty() {
            return Err(StatsError::Empty(label));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite { label, index });
        }
        Ok(Self { label, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// x tends to be smaller than y
    Less,
    /// x tends to be larger than y
    Greater,
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternative::TwoSided => "two-sided",
            Alternative::Less => "less",
            Alternative::Greater => "greater",
        })
    }
}

impl FromStr for Alternative {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two-sided" => Ok(Alternative::TwoSided),
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            other => Err(StatsError::Alternative(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample
    pub u: f64,
    pub p: f64,
}

/// Midranks (1-based) of the pooled values; also returns `Σ (t³ − t)` over tie groups.
fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// U statistic of `x` only, with midranks for ties.
pub fn u_statistic(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, _) = midranks(&pooled);
    let n1 = x.len() as f64;
    ranks[..x.len()].iter().sum::<f64>() - n1 * (n1 + 1.0) / 2.0
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction. All-identical pooled values give `p = 1`.
pub fn mann_whitney_u(x: &SampleSet, y: &SampleSet, alternative: Alternative) -> Result<MannWhitney, StatsError> {
    if x.len() < 3 || y.len() < 3 {
        return Err(StatsError::TooSmall { x: x.len(), y: y.len() });
    }
    let pooled: Vec<f64> = x.values.iter().chain(&y.values).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let n1 = x.len() as f64;
    let n2 = y.len() as f64;
    let n = n1 + n2;
    let u = ranks[..x.len()].iter().sum::<f64>() - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0 });
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = match alternative {
        Alternative::TwoSided => {
            let z = ((u - mu).abs() - 0.5).max(0.0) / sd;
            2.0 * normal.sf(z)
        }
        Alternative::Greater => normal.sf((u - mu - 0.5) / sd),
        Alternative::Less => normal.cdf((u - mu + 0.5) / sd),
    };
    Ok(MannWhitney { u, p: p.clamp(0.0, 1.0) })
}

pub fn bonferroni_adjust(p: f64, m: usize) -> Result<f64, StatsError> {
    if m == 0 {
        return Err(StatsError::Comparisons);
    }
    Ok((p * m as f64).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// population standard deviation
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `None` for an empty input.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Summary {
        n: values.len(),
        mean,
        std: var.sqrt(),
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

/// Exact two-sided permutation p-value of U, enumerating every split of the
/// pooled sample. Meant for small samples.
pub fn exact_permutation_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, _) = midranks(&pooled);
    let n1 = x.len();
    let n = pooled.len();
    let mu = (n1 * (n - n1)) as f64 / 2.0;
    let base = n1 as f64 * (n1 as f64 + 1.0) / 2.0;
    let observed = (ranks[..n1].iter().sum::<f64>() - base - mu).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    // enumerate subsets of size n1 by bitmask
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let r: f64 = (0..n).filter(|&k| mask & (1 << k) != 0).map(|k| ranks[k]).sum();
        total += 1;
        if (r - base - mu).abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[f64]) -> SampleSet {
        SampleSet::new("s", v.to_vec()).unwrap()
    }

    fn pair_count(x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .flat_map(|a| y.iter().map(move |b| if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 }))
            .sum()
    }

    #[test]
    fn u_examples() {
        assert_eq!(u_statistic(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), 0.0);
        assert_eq!(u_statistic(&[1.0, 3.0], &[2.0, 4.0]), 1.0);
        let x = [1.0, 2.0, 2.0, 5.0];
        assert_eq!(u_statistic(&x, &x), 8.0);
    }

    #[test]
    fn identical_values_give_unit_p() {
        let r = mann_whitney_u(&set(&[2.0; 4]), &set(&[2.0; 5]), Alternative::TwoSided).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn separated_samples_are_significant() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = (100..120).map(f64::from).collect();
        let r = mann_whitney_u(&set(&x), &set(&y), Alternative::TwoSided).unwrap();
        assert!(r.p < 1e-6);
        let less = mann_whitney_u(&set(&x), &set(&y), Alternative::Less).unwrap();
        let greater = mann_whitney_u(&set(&x), &set(&y), Alternative::Greater).unwrap();
        assert!(less.p < 1e-6 && greater.p > 0.99);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(SampleSet::new("e", vec![]).is_err());
        assert!(SampleSet::new("n", vec![1.0, f64::NAN]).is_err());
        assert!(mann_whitney_u(&set(&[1.0, 2.0]), &set(&[1.0, 2.0, 3.0]), Alternative::TwoSided).is_err());
    }

    #[test]
    fn bonferroni_examples() {
        assert!((bonferroni_adjust(0.01, 3).unwrap() - 0.03).abs() < 1e-15);
        assert_eq!(bonferroni_adjust(0.5, 3).unwrap(), 1.0);
        assert_eq!(bonferroni_adjust(0.2, 1).unwrap(), 0.2);
        assert!(bonferroni_adjust(0.2, 0).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.median), (2.0, 2.0));
        assert_eq!(summarize(&[4.0; 5]).unwrap().std, 0.0);
        let q = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((q.q1, q.q3), (1.75, 3.25));
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn exact_oracle_on_separated_samples() {
        // C(6,3) = 20 splits, two as extreme as complete separation
        assert!((exact_permutation_p(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]) - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn u_matches_pair_counting(
            x in prop::collection::vec(0u8..6, 3..10),
            y in prop::collection::vec(0u8..6, 3..10),
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            let ux = mann_whitney_u(&set(&x), &set(&y), Alternative::TwoSided).unwrap();
            prop_assert_eq!(ux.u, pair_count(&x, &y));
            let uy = u_statistic(&y, &x);
            prop_assert_eq!(ux.u + uy, (x.len() * y.len()) as f64);
            prop_assert!((0.0..=1.0).contains(&ux.p));
        }

        #[test]
        fn bonferroni_in_unit_interval(p in 0.0f64..=1.0, m in 1usize..50) {
            let a = bonferroni_adjust(p, m).unwrap();
            prop_assert!((0.0..=1.0).contains(&a) && a >= p);
        }
    }
}
