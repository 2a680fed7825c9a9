use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::special::normal_cdf;
use super::{cohens_d, Method, TestResult};
use crate::error::{Error, Result};

/// Combined sample size at or below which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 12;

/// The exact distribution is also used when the smaller sample has at most
/// this many points, where the normal approximation is poor and enumeration
/// is cheap.
pub const EXACT_MAX_SMALLER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// `a` tends to exceed `b`.
    Greater,
    /// `a` tends to fall below `b`.
    Less,
}

fn default_method(n_a: usize, n_b: usize) -> Method {
    if n_a + n_b <= EXACT_MAX_N || n_a.min(n_b) <= EXACT_MAX_SMALLER {
        Method::Exact
    } else {
        Method::NormalApproximation
    }
}

/// Two-sided Mann-Whitney U test.
///
/// Uses the exact permutation distribution of the rank sum (midranks for
/// ties) when `n_a + n_b <= 12` or the smaller sample is tiny, and the tie-
/// and continuity-corrected normal approximation otherwise. The reported
/// statistic is `min(U_a, U_b)`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    mann_whitney_u_with(a, b, default_method(a.len(), b.len()))
}

/// Mann-Whitney U test with an explicitly chosen method.
pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: Method) -> Result<TestResult> {
    mann_whitney_test(a, b, Alternative::TwoSided, method)
}

/// One-sided test with the default method. The statistic is `U_a`.
pub fn mann_whitney_one_sided(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    mann_whitney_test(a, b, alternative, default_method(a.len(), b.len()))
}

fn mann_whitney_test(a: &[f64], b: &[f64], alternative: Alternative, method: Method) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("mann-whitney: both samples must be non-empty"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::invalid("mann-whitney: NaN in sample"));
    }
    let n_a = a.len();
    let n_b = b.len();
    let ranks2 = doubled_midranks(a, b);
    let sum2_a: i64 = ranks2[..n_a].iter().sum();
    // U_a = R_a - n_a (n_a + 1) / 2, in doubled units.
    let base2 = (n_a * (n_a + 1)) as i64;
    let u2_a = sum2_a - base2;
    let u2_b = 2 * (n_a * n_b) as i64 - u2_a;
    let statistic = match alternative {
        Alternative::TwoSided => u2_a.min(u2_b) as f64 / 2.0,
        _ => u2_a as f64 / 2.0,
    };

    let p_value = match method {
        Method::Exact => exact_p(&ranks2, n_a, sum2_a, alternative),
        Method::NormalApproximation => normal_p(&ranks2, n_a, n_b, u2_a as f64 / 2.0, alternative),
        Method::TDistribution => {
            return Err(Error::invalid("mann-whitney: t-distribution method not applicable"))
        }
    };

    Ok(TestResult {
        statistic,
        p_value: p_value.clamp(0.0, 1.0),
        effect_size: cohens_d(a, b).ok(),
        n_a,
        n_b,
        method,
    })
}

/// Midranks of the pooled sample, doubled so they are integers.
/// The first `a.len()` entries belong to `a`.
fn doubled_midranks(a: &[f64], b: &[f64]) -> Vec<i64> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).unwrap_or(Ordering::Equal));
    let mut ranks2 = vec![0_i64; pooled.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based: start+1 ..= end); doubled midrank = start + 1 + end.
        let r2 = (start + 1 + end) as i64;
        for &idx in &order[start..end] {
            ranks2[idx] = r2;
        }
        start = end;
    }
    ranks2
}

/// Exact p from the permutation distribution of the doubled rank sum of `a`.
/// Enumerates subsets of the smaller sample's size.
fn exact_p(ranks2: &[i64], n_a: usize, observed_sum2: i64, alternative: Alternative) -> f64 {
    let n = ranks2.len();
    let total: i64 = ranks2.iter().sum();
    // Work with the smaller side; its sum determines the other.
    let (k, flip) = if n_a <= n - n_a { (n_a, false) } else { (n - n_a, true) };
    let max_sum = total as usize;
    // ways[j][s]: number of j-subsets with doubled rank sum s.
    let mut ways = vec![vec![0_f64; max_sum + 1]; k + 1];
    ways[0][0] = 1.0;
    for &r in ranks2 {
        let r = r as usize;
        for j in (1..=k).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[j - 1][s - r];
                if add != 0.0 {
                    ways[j][s] += add;
                }
            }
        }
    }
    // Null mean of the doubled rank sum of `a` is n_a (n + 1).
    let mean2 = n_a as i64 * (n as i64 + 1);
    let observed_dev = observed_sum2 - mean2;
    let mut extreme = 0.0;
    let mut count = 0.0;
    for (s, &w) in ways[k].iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        count += w;
        let sum_a = if flip { total - s as i64 } else { s as i64 };
        let dev = sum_a - mean2;
        let hit = match alternative {
            Alternative::TwoSided => dev.abs() >= observed_dev.abs(),
            Alternative::Greater => dev >= observed_dev,
            Alternative::Less => dev <= observed_dev,
        };
        if hit {
            extreme += w;
        }
    }
    extreme / count
}

fn normal_p(ranks2: &[i64], n_a: usize, n_b: usize, u_a: f64, alternative: Alternative) -> f64 {
    let n = (n_a + n_b) as f64;
    let na = n_a as f64;
    let nb = n_b as f64;
    let mean = na * nb / 2.0;

    let mut sorted = ranks2.to_vec();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let variance = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance <= 0.0 {
        return 1.0;
    }
    let sd = variance.sqrt();
    match alternative {
        Alternative::TwoSided => {
            let dev = ((u_a - mean).abs() - 0.5).max(0.0);
            2.0 * (1.0 - normal_cdf(dev / sd))
        }
        Alternative::Greater => 1.0 - normal_cdf((u_a - mean - 0.5) / sd),
        Alternative::Less => normal_cdf((u_a - mean + 0.5) / sd),
    }
}
