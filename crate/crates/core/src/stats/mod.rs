//! Statistical kernel: rank and t tests, effect sizes, multiple-comparison
//! correction, bootstrap intervals, correlation and concentration measures.
//!
//! Every function is pure. Randomized procedures take an explicit seed.

mod bootstrap;
mod mann_whitney;
pub mod special;

use serde::{Deserialize, Serialize};

pub use bootstrap::{bootstrap_ci, percentile_interval, BootstrapCI, Statistic};
pub use mann_whitney::{
    mann_whitney_one_sided, mann_whitney_u, mann_whitney_u_with, Alternative, EXACT_MAX_N, EXACT_MAX_SMALLER,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    NormalApproximation,
    TDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// p-value in `[0, 1]`; two-sided unless the test says otherwise.
    pub p_value: f64,
    /// Cohen's d of the two samples, when defined.
    pub effect_size: Option<f64>,
    pub n_a: usize,
    pub n_b: usize,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> MeanSd {
        MeanSd {
            mean: mean(xs),
            sd: std_dev(xs),
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator). Zero for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cohen's d with the pooled (n - 1 weighted) standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("cohen's d needs at least two points per sample"));
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let pooled = ((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / (na + nb - 2.0);
    if pooled <= 0.0 {
        return Err(Error::degenerate("cohen's d: zero pooled variance"));
    }
    Ok((mean(a) - mean(b)) / pooled.sqrt())
}

/// Bonferroni correction: every p multiplied by the number of tests, capped at 1.
pub fn bonferroni(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len() as f64;
    Ok(p_values.iter().map(|p| (p * m).min(1.0)).collect())
}

/// Gini coefficient of a non-negative distribution, computed from the sorted
/// values as `sum_i (2i - n - 1) x_(i) / (n * sum x)`.
pub fn gini(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("gini of an empty distribution"));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("gini requires finite non-negative weights"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::degenerate("gini of an all-zero distribution"));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Sample Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "pearson: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::degenerate("pearson: zero variance input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Welch's unequal-variance t-test, two-sided, with Welch-Satterthwaite df.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("welch t-test needs at least two points per sample"));
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let va = variance(a) / na;
    let vb = variance(b) / nb;
    let se2 = va + vb;
    if se2 <= 0.0 {
        return Err(Error::degenerate("welch t-test: zero variance in both samples"));
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(TestResult {
        statistic: t,
        p_value: special::student_t_two_sided(t, df),
        effect_size: cohens_d(a, b).ok(),
        n_a: a.len(),
        n_b: b.len(),
        method: Method::TDistribution,
    })
}

/// One-sample two-sided t-test of `H0: mean(xs) = 0`.
///
/// The effect size is the mean over the sample standard deviation.
pub fn one_sample_t(xs: &[f64]) -> Result<TestResult> {
    if xs.len() < 2 {
        return Err(Error::invalid("one-sample t-test needs at least two points"));
    }
    let n = xs.len() as f64;
    let sd = std_dev(xs);
    if sd <= 0.0 {
        return Err(Error::degenerate("one-sample t-test: zero variance"));
    }
    let m = mean(xs);
    let t = m / (sd / n.sqrt());
    Ok(TestResult {
        statistic: t,
        p_value: special::student_t_two_sided(t, n - 1.0),
        effect_size: Some(m / sd),
        n_a: xs.len(),
        n_b: 0,
        method: Method::TDistribution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gini_pairwise(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let mut s = 0.0;
        for x in xs {
            for y in xs {
                s += (x - y).abs();
            }
        }
        s / (2.0 * n * n * m)
    }

    #[test]
    fn bonferroni_fixtures() {
        assert_eq!(bonferroni(&[0.01]).unwrap(), vec![0.01]);
        assert_eq!(bonferroni(&[0.02, 0.5]).unwrap(), vec![0.04, 1.0]);
        let r = bonferroni(&[0.3, 0.4, 0.5]).unwrap();
        assert!((r[0] - 0.9).abs() < 1e-15);
        assert_eq!(&r[1..], &[1.0, 1.0]);
        assert!(bonferroni(&[1.2]).is_err());
        assert!(bonferroni(&[]).unwrap().is_empty());
    }

    #[test]
    fn cohens_d_fixtures() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        // Means 1 apart, both sds 1.
        let d = cohens_d(&[0.0, 1.0, 2.0], &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(d, 1.0);
        assert!(cohens_d(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(cohens_d(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn cohens_d_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let na = rng.gen_range(2..30);
            let nb = rng.gen_range(2..30);
            let a: Vec<f64> = (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(-1.0..5.0)).collect();
            let ma = a.iter().sum::<f64>() / na as f64;
            let mb = b.iter().sum::<f64>() / nb as f64;
            let ssa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let ssb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
            let sd = ((ssa + ssb) / (na + nb - 2) as f64).sqrt();
            let expect = (ma - mb) / sd;
            assert!((cohens_d(&a, &b).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gini_fixtures() {
        assert_eq!(gini(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.75);
        assert_eq!(gini(&[0.25; 4]).unwrap(), 0.0);
        assert_eq!(gini(&[3.0]).unwrap(), 0.0);
        assert!(gini(&[0.0, 0.0]).is_err());
        assert!(gini(&[1.0, -0.1]).is_err());
    }

    #[test]
    fn gini_matches_pairwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert!((gini(&xs).unwrap() - gini_pairwise(&xs)).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_fixtures() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&a, &[1.0; 4]).is_err());
        assert!(pearson(&a, &[1.0; 3]).is_err());
    }

    #[test]
    fn pearson_matches_covariance_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(3..50);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nf = n as f64;
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let saa: f64 = a.iter().map(|x| x * x).sum();
            let sbb: f64 = b.iter().map(|x| x * x).sum();
            let cov = sab / nf - sa * sb / (nf * nf);
            let expect = cov / ((saa / nf - (sa / nf).powi(2)).sqrt() * (sbb / nf - (sb / nf).powi(2)).sqrt());
            assert!((pearson(&a, &b).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn welch_fixtures() {
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((r.statistic + 1.0).abs() < 1e-12);
        // Equal variances and sizes: df = 8.
        let expect = special::student_t_two_sided(1.0, 8.0);
        assert!((r.p_value - expect).abs() < 1e-12);
        let a = [0.2, 0.5, 0.9, 1.4];
        let same = welch_t(&a, &a).unwrap();
        assert!(same.p_value >= 0.99);
        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn one_sample_t_detects_shift() {
        let r = one_sample_t(&[1.0, 1.2, 0.9, 1.1, 1.05]).unwrap();
        assert!(r.p_value < 1e-4);
        let r = one_sample_t(&[-1.0, 1.0, -0.5, 0.5]).unwrap();
        assert!(r.p_value > 0.99);
        assert!(one_sample_t(&[0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn gini_bounds_and_scaling(xs in prop::collection::vec(0.0f64..10.0, 1..30), scale in 0.01f64..100.0) {
            prop_assume!(xs.iter().sum::<f64>() > 1e-9);
            let g = gini(&xs).unwrap();
            let n = xs.len() as f64;
            prop_assert!(g >= 0.0 && g <= 1.0 - 1.0 / n + 1e-12);
            let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
            prop_assert!((gini(&scaled).unwrap() - g).abs() < 1e-12);
        }

        #[test]
        fn mann_whitney_symmetric(a in prop::collection::vec(-5i32..5, 1..10), b in prop::collection::vec(-5i32..5, 1..10)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let ab = mann_whitney_u(&a, &b).unwrap();
            let ba = mann_whitney_u(&b, &a).unwrap();
            prop_assert_eq!(ab.p_value, ba.p_value);
            prop_assert_eq!(ab.statistic, ba.statistic);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }

        #[test]
        fn pearson_affine_invariance(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let a: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let r = match pearson(&a, &b) { Ok(r) => r, Err(_) => return Ok(()) };
            let a2: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
            prop_assert!((pearson(&a2, &b).unwrap() - r).abs() < 1e-9);
            let neg: Vec<f64> = a.iter().map(|x| -x).collect();
            prop_assert!((pearson(&neg, &b).unwrap() + r).abs() < 1e-12);
        }
    }
}
