//! Welch t-tests and rank grouping of strategies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CliError, Result};

pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    pub p_two_sided: f64,
    pub significant: bool,
}

/// Which mean the one-sided alternative puts higher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alternative {
    Greater,
    Less,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation, 0 for fewer than two values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 { 0.0 } else { mean_var(x).1.sqrt() }
}

fn student_cdf(t: f64, dof: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| CliError::Stats(e.to_string()))?;
    Ok(dist.cdf(t))
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CliError::Stats(format!("need at least two samples each, got {} and {}", a.len(), b.len())));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        return Err(CliError::Stats("both samples have zero variance".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = (2.0 * student_cdf(-t.abs(), dof)?).min(1.0);
    Ok(WelchResult { t, dof, p_two_sided: p, significant: p < SIGNIFICANCE })
}

/// One-sided p-value of the Welch statistic for `mean(a) > mean(b)` or `<`.
pub fn welch_one_sided(a: &[f64], b: &[f64], alt: Alternative) -> Result<f64> {
    let r = welch_ttest(a, b)?;
    student_cdf(
        match alt {
            Alternative::Greater => -r.t,
            Alternative::Less => r.t,
        },
        r.dof,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

/// Orders strategies by mean and gives consecutive strategies the same rank
/// unless their Welch test is significant. Strategies without samples are
/// skipped with a warning. Samples with zero variance on both sides
/// are treated as equal when their means agree and as different otherwise.
pub fn rank_methods(groups: &[(String, Vec<f64>)], direction: Direction) -> Result<Vec<(String, usize)>> {
    let mut kept: Vec<(&String, &Vec<f64>, f64)> = groups
        .iter()
        .filter(|(name, v)| {
            if v.is_empty() {
                log::warn!("strategy {name} has no samples for this metric, excluded from ranking");
            }
            !v.is_empty()
        })
        .map(|(n, v)| (n, v, mean(v)))
        .collect();
    if kept.is_empty() {
        return Err(CliError::Stats("nothing to rank".into()));
    }
    kept.sort_by(|a, b| match direction {
        Direction::LowerIsBetter => a.2.total_cmp(&b.2),
        Direction::HigherIsBetter => b.2.total_cmp(&a.2),
    });
    let mut ranks = vec![(kept[0].0.clone(), 1)];
    let mut rank = 1;
    for w in kept.windows(2) {
        let differ = match welch_ttest(w[0].1, w[1].1) {
            Ok(r) => r.significant,
            Err(_) => w[0].2 != w[1].2 && w[0].1.len() > 1 && w[1].1.len() > 1,
        };
        if differ {
            rank += 1;
        }
        ranks.push((w[1].0.clone(), rank));
    }
    Ok(ranks)
}

/// Sums per-metric ranks; strategies with equal sums share the overall rank.
pub fn overall_ranks(per_metric: &[Vec<(String, usize)>]) -> Vec<(String, usize, usize)> {
    let mut sums: BTreeMap<&str, usize> = BTreeMap::new();
    for metric in per_metric {
        for (name, r) in metric {
            *sums.entry(name).or_default() += r;
        }
    }
    let mut list: Vec<(String, usize)> = sums.into_iter().map(|(n, s)| (n.to_string(), s)).collect();
    list.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut out = Vec::with_capacity(list.len());
    for (i, (name, sum)) in list.iter().enumerate() {
        let overall = if i > 0 && list[i - 1].1 == *sum { out.last().map_or(1, |o: &(String, usize, usize)| o.2) } else { i + 1 };
        out.push((name.clone(), *sum, overall));
    }
    out
}
