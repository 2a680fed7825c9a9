use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean, median};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    Mean,
    Median,
    /// Mean of a sample of modularity scores.
    ModularityMean,
}

impl Statistic {
    pub fn apply(self, xs: &[f64]) -> f64 {
        match self {
            Statistic::Mean | Statistic::ModularityMean => mean(xs),
            Statistic::Median => median(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub n_resamples: usize,
}

/// Percentile bootstrap interval of `statistic` over `n_resamples`
/// with-replacement resamples drawn from a ChaCha stream seeded by `seed`.
pub fn bootstrap_ci(
    sample: &[f64],
    statistic: Statistic,
    n_resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapCI> {
    if sample.len() < 2 {
        return Err(Error::invalid("bootstrap needs a sample of size >= 2"));
    }
    if n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sample.len();
    let mut buf = vec![0.0; n];
    let stats: Vec<f64> = (0..n_resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = sample[rng.gen_range(0..n)];
            }
            statistic.apply(&buf)
        })
        .collect();
    percentile_interval(statistic.apply(sample), stats, confidence)
}

/// Percentile interval from already computed bootstrap replicates.
pub fn percentile_interval(point: f64, mut replicates: Vec<f64>, confidence: f64) -> Result<BootstrapCI> {
    if replicates.is_empty() {
        return Err(Error::invalid("no bootstrap replicates"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} outside (0, 1)")));
    }
    replicates.sort_by(f64::total_cmp);
    let alpha = 1.0 - confidence;
    Ok(BootstrapCI {
        point,
        lower: quantile_sorted(&replicates, alpha / 2.0),
        upper: quantile_sorted(&replicates, 1.0 - alpha / 2.0),
        confidence,
        n_resamples: replicates.len(),
    })
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_sample_degenerate_interval() {
        let ci = bootstrap_ci(&[2.5; 4], Statistic::Mean, 1000, 0.95, 1).unwrap();
        assert_eq!(ci.lower, 2.5);
        assert_eq!(ci.upper, 2.5);
        assert_eq!(ci.point, 2.5);
    }

    #[test]
    fn deterministic_per_seed() {
        let xs = [0.1, 0.7, 0.3, 1.9, -0.2, 0.8];
        let a = bootstrap_ci(&xs, Statistic::Median, 500, 0.95, 42).unwrap();
        let b = bootstrap_ci(&xs, Statistic::Median, 500, 0.95, 42).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&xs, Statistic::Median, 500, 0.95, 43).unwrap();
        assert!(a.lower <= a.upper && c.lower <= c.upper);
    }

    #[test]
    fn normal_mean_width_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let xs: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ci = bootstrap_ci(&xs, Statistic::Mean, 1000, 0.95, 9).unwrap();
        let analytic = 2.0 * 1.96 / (200.0_f64).sqrt();
        let width = ci.upper - ci.lower;
        assert!((width - analytic).abs() / analytic < 0.15, "width {width} vs {analytic}");
        assert!(ci.lower <= ci.point && ci.point <= ci.upper);
    }

    #[test]
    fn undersized_sample_rejected() {
        assert!(bootstrap_ci(&[1.0], Statistic::Mean, 10, 0.95, 0).is_err());
    }
}
