//! Mean-ablation influence of MLP neurons, the log-log rank fit and the
//! plateau / power-law / rapid-decay regime split.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Context, TokenGroup};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model, NeuronMeans, Pooling};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub neuron: usize,
    /// Absolute change in mean context loss (nats).
    pub influence: f64,
    /// Ablated minus baseline mean loss. Positive means the neuron helped.
    pub signed_delta: f64,
}

/// Neurons of one layer ranked by influence for one token group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceProfile {
    entries: Vec<InfluenceEntry>,
    pub token_group: TokenGroup,
    pub layer: usize,
}

impl InfluenceProfile {
    /// Sorts entries by influence, descending, ties by neuron id.
    pub fn new(mut entries: Vec<InfluenceEntry>, token_group: TokenGroup, layer: usize) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !(e.influence >= 0.0) || !e.influence.is_finite()) {
            return Err(Error::invalid(format!(
                "neuron {} has invalid influence {}",
                e.neuron, e.influence
            )));
        }
        entries.sort_by(|a, b| b.influence.total_cmp(&a.influence).then(a.neuron.cmp(&b.neuron)));
        let mut ids: Vec<usize> = entries.iter().map(|e| e.neuron).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate neuron id in influence profile"));
        }
        Ok(InfluenceProfile {
            entries,
            token_group,
            layer,
        })
    }

    pub fn entries(&self) -> &[InfluenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn influences(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.influence).collect()
    }

    /// Neuron ids in rank order.
    pub fn neurons(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.neuron).collect()
    }

    /// The `k` most influential neurons.
    pub fn top(&self, k: usize) -> Vec<usize> {
        self.entries.iter().take(k).map(|e| e.neuron).collect()
    }
}

/// Influence of every neuron in `layer`, with means taken over `contexts`
/// at their target positions.
pub fn compute_influences(
    model: &Model,
    contexts: &[Context],
    group: TokenGroup,
    layer: usize,
    pooling: Pooling,
) -> Result<InfluenceProfile> {
    if contexts.is_empty() {
        return Err(Error::invalid(format!("no {} contexts to ablate", group.as_str())));
    }
    let traces = baseline_traces(model, contexts)?;
    let targets: Vec<usize> = contexts.iter().map(|c| c.target).collect();
    let means = NeuronMeans::from_traces(model, &traces, &targets, pooling)?;
    influences_from_traces(model, contexts, &traces, group, layer, &means)
}

/// Like [`compute_influences`], with externally supplied means.
pub fn compute_influences_with_means(
    model: &Model,
    contexts: &[Context],
    group: TokenGroup,
    layer: usize,
    means: &NeuronMeans,
) -> Result<InfluenceProfile> {
    if contexts.is_empty() {
        return Err(Error::invalid(format!("no {} contexts to ablate", group.as_str())));
    }
    let traces = baseline_traces(model, contexts)?;
    influences_from_traces(model, contexts, &traces, group, layer, means)
}

fn baseline_traces(model: &Model, contexts: &[Context]) -> Result<Vec<ForwardTrace>> {
    for c in contexts {
        c.validate()?;
    }
    contexts.par_iter().map(|c| model.forward(&c.tokens, &[])).collect()
}

fn influences_from_traces(
    model: &Model,
    contexts: &[Context],
    traces: &[ForwardTrace],
    group: TokenGroup,
    layer: usize,
    means: &NeuronMeans,
) -> Result<InfluenceProfile> {
    let cfg = model.config();
    if layer >= cfg.n_layers {
        return Err(Error::invalid(format!("layer {layer} out of range ({} layers)", cfg.n_layers)));
    }
    let n = contexts.len() as f64;
    let baseline = traces
        .iter()
        .zip(contexts)
        .map(|(t, c)| t.context_loss(c.target))
        .sum::<Result<f64>>()?
        / n;
    let entries = (0..cfg.d_mlp)
        .into_par_iter()
        .map(|neuron| {
            let mut total = 0.0;
            for (trace, ctx) in traces.iter().zip(contexts) {
                total += model.mean_ablated_context_loss(trace, layer, neuron, ctx.target, means)?;
            }
            let delta = total / n - baseline;
            Ok(InfluenceEntry {
                neuron,
                influence: delta.abs(),
                signed_delta: delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    InfluenceProfile::new(entries, group, layer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    /// Residual above which a top-ranked neuron is plateau (and excluded from the refit).
    pub plateau: f64,
    /// Residual below which a bottom-ranked neuron is rapid-decay.
    pub rapid_decay: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            plateau: 0.5,
            rapid_decay: -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub kappa: f64,
    pub beta: f64,
    pub r_squared: f64,
    /// Observed minus fitted log influence per rank; `None` where the influence is zero.
    pub residuals: Vec<Option<f64>>,
    /// First and last rank (1-based) that entered the final fit.
    pub fit_range: (usize, usize),
    /// Ranks dropped after the first pass.
    pub excluded_ranks: Vec<usize>,
    pub n_fit_points: usize,
}

impl PowerLawFit {
    pub fn fitted(&self, rank: usize) -> f64 {
        self.beta - self.kappa * (rank as f64).ln()
    }
}

pub const MIN_FIT_POINTS: usize = 10;

pub fn fit_power_law(profile: &InfluenceProfile) -> Result<PowerLawFit> {
    fit_power_law_with(profile, &RegimeThresholds::default())
}

/// Two-pass fit of log influence on log rank. The first pass is a Theil-Sen
/// line, which the high-leverage top ranks cannot drag; points whose
/// first-pass residual exceeds `thresholds.plateau` are dropped and the rest
/// refit by ordinary least squares.
pub fn fit_power_law_with(profile: &InfluenceProfile, thresholds: &RegimeThresholds) -> Result<PowerLawFit> {
    let points: Vec<(usize, f64, f64)> = profile
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.influence > 0.0)
        .map(|(i, e)| (i + 1, ((i + 1) as f64).ln(), e.influence.ln()))
        .collect();
    if points.len() < MIN_FIT_POINTS {
        return Err(Error::degenerate(format!(
            "power-law fit needs at least {MIN_FIT_POINTS} positive influences, got {}",
            points.len()
        )));
    }
    let (slope, intercept) = theil_sen(&points)?;
    let excluded: Vec<usize> = points
        .iter()
        .filter(|p| p.2 - (intercept + slope * p.1) > thresholds.plateau)
        .map(|p| p.0)
        .collect();
    let kept: Vec<(usize, f64, f64)> = points.iter().copied().filter(|p| !excluded.contains(&p.0)).collect();
    let (slope, intercept, r_squared, kept, excluded) = if kept.len() >= 3 {
        match ols(&kept) {
            Ok((s, b, r2)) => (s, b, r2, kept, excluded),
            Err(_) => {
                let (s, b, r2) = ols(&points)?;
                (s, b, r2, points.clone(), Vec::new())
            }
        }
    } else {
        let (s, b, r2) = ols(&points)?;
        (s, b, r2, points.clone(), Vec::new())
    };
    let residuals = profile
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            (e.influence > 0.0).then(|| e.influence.ln() - (intercept + slope * ((i + 1) as f64).ln()))
        })
        .collect();
    Ok(PowerLawFit {
        kappa: -slope,
        beta: intercept,
        r_squared,
        residuals,
        fit_range: (kept[0].0, kept[kept.len() - 1].0),
        excluded_ranks: excluded,
        n_fit_points: kept.len(),
    })
}

const THEIL_SEN_MAX_PAIRS: usize = 2_000_000;

/// Median pairwise slope and median intercept. Large inputs use the pairs
/// `(i, i + n/2)` only.
fn theil_sen(points: &[(usize, f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len();
    let mut slopes = Vec::new();
    let mut push = |a: &(usize, f64, f64), b: &(usize, f64, f64)| {
        if b.1 != a.1 {
            slopes.push((b.2 - a.2) / (b.1 - a.1));
        }
    };
    if n * (n - 1) / 2 <= THEIL_SEN_MAX_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                push(&points[i], &points[j]);
            }
        }
    } else {
        let half = n / 2;
        for i in 0..n - half {
            push(&points[i], &points[i + half]);
        }
    }
    if slopes.is_empty() {
        return Err(Error::degenerate("power-law fit: ranks do not vary"));
    }
    let slope = crate::stats::median(&slopes);
    let offsets: Vec<f64> = points.iter().map(|p| p.2 - slope * p.1).collect();
    Ok((slope, crate::stats::median(&offsets)))
}

/// Returns (slope, intercept, R²).
fn ols(points: &[(usize, f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.1).sum::<f64>() / n;
    let my = points.iter().map(|p| p.2).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.1 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.1 - mx) * (p.2 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.2 - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= f64::EPSILON * n * my.abs().max(1.0) {
        return Err(Error::degenerate("power-law fit: influences have zero variance"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.2 - intercept - slope * p.1).powi(2)).sum();
    let r_squared = (1.0 - sse / syy).clamp(0.0, 1.0);
    Ok((slope, intercept, r_squared))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Plateau,
    PowerLaw,
    RapidDecay,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Plateau => "plateau",
            Regime::PowerLaw => "power-law",
            Regime::RapidDecay => "rapid-decay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeLabels {
    /// `(neuron, regime)` in rank order.
    pub labels: Vec<(usize, Regime)>,
    pub plateau_count: usize,
    pub rapid_decay_count: usize,
}

impl RegimeLabels {
    pub fn plateau_neurons(&self) -> Vec<usize> {
        self.with(Regime::Plateau)
    }

    pub fn with(&self, regime: Regime) -> Vec<usize> {
        self.labels.iter().filter(|l| l.1 == regime).map(|l| l.0).collect()
    }
}

pub fn classify_regimes(profile: &InfluenceProfile, fit: &PowerLawFit) -> Result<RegimeLabels> {
    classify_regimes_with(profile, fit, &RegimeThresholds::default())
}

/// Plateau is the longest top-rank prefix above `thresholds.plateau`; rapid
/// decay the longest bottom-rank suffix below `thresholds.rapid_decay`
/// (zero influences count as rapid decay). Everything else is power-law.
pub fn classify_regimes_with(
    profile: &InfluenceProfile,
    fit: &PowerLawFit,
    thresholds: &RegimeThresholds,
) -> Result<RegimeLabels> {
    let n = profile.len();
    if fit.residuals.len() != n {
        return Err(Error::invalid(format!(
            "fit has {} residuals for a profile of {n} neurons",
            fit.residuals.len()
        )));
    }
    let plateau_count = fit
        .residuals
        .iter()
        .take_while(|r| matches!(r, Some(d) if *d > thresholds.plateau))
        .count();
    let rapid_decay_count = fit.residuals[plateau_count..]
        .iter()
        .rev()
        .take_while(|r| match r {
            None => true,
            Some(d) => *d < thresholds.rapid_decay,
        })
        .count();
    let labels = profile
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let regime = if i < plateau_count {
                Regime::Plateau
            } else if i >= n - rapid_decay_count {
                Regime::RapidDecay
            } else {
                Regime::PowerLaw
            };
            (e.neuron, regime)
        })
        .collect();
    Ok(RegimeLabels {
        labels,
        plateau_count,
        rapid_decay_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRegimeSummary {
    pub token_group: TokenGroup,
    pub n_neurons: usize,
    pub plateau_count: usize,
    pub rapid_decay_count: usize,
    pub kappa: f64,
    pub r_squared: f64,
    /// Fraction of fitted neurons with |residual| < 0.1.
    pub frac_small_residual: f64,
    pub plateau_regime: bool,
    pub pure_power_law: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualRegimeReport {
    pub rare: GroupRegimeSummary,
    pub common: GroupRegimeSummary,
    pub dual_regime: bool,
}

/// Share of small residuals needed for the pure power-law flag.
pub const PURE_POWER_LAW_SHARE: f64 = 0.95;

pub fn summarize_group(profile: &InfluenceProfile, fit: &PowerLawFit, labels: &RegimeLabels) -> GroupRegimeSummary {
    let fitted: Vec<f64> = fit.residuals.iter().flatten().copied().collect();
    let frac_small_residual = if fitted.is_empty() {
        0.0
    } else {
        fitted.iter().filter(|d| d.abs() < 0.1).count() as f64 / fitted.len() as f64
    };
    GroupRegimeSummary {
        token_group: profile.token_group,
        n_neurons: profile.len(),
        plateau_count: labels.plateau_count,
        rapid_decay_count: labels.rapid_decay_count,
        kappa: fit.kappa,
        r_squared: fit.r_squared,
        frac_small_residual,
        plateau_regime: labels.plateau_count > 0,
        pure_power_law: labels.plateau_count == 0 && frac_small_residual >= PURE_POWER_LAW_SHARE,
    }
}

pub fn compare_groups(
    rare: (&InfluenceProfile, &PowerLawFit, &RegimeLabels),
    common: (&InfluenceProfile, &PowerLawFit, &RegimeLabels),
) -> DualRegimeReport {
    let rare = summarize_group(rare.0, rare.1, rare.2);
    let common = summarize_group(common.0, common.1, common.2);
    let dual_regime = rare.plateau_count > 0 && common.plateau_count == 0;
    DualRegimeReport {
        rare,
        common,
        dual_regime,
    }
}

/// Parameters of a synthetic rank-influence curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfileSpec {
    pub n_neurons: usize,
    pub kappa: f64,
    pub beta: f64,
    /// Number of top ranks lifted above the power law.
    pub plateau: usize,
    /// Log-space lift of the plateau ranks.
    pub plateau_lift: f64,
    /// Standard deviation of Gaussian noise in log space.
    pub noise: f64,
}

/// Draws a profile whose log influence is `beta - kappa * ln(rank) + noise`,
/// lifting the top `plateau` ranks. Neuron ids are shuffled so rank and id
/// are unrelated. Returns the profile and the plateau neuron ids.
pub fn synthetic_profile(spec: &SyntheticProfileSpec, seed: u64) -> Result<(InfluenceProfile, Vec<usize>)> {
    if spec.n_neurons == 0 || spec.plateau > spec.n_neurons || !(spec.noise >= 0.0) {
        return Err(Error::invalid("invalid synthetic profile parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..spec.n_neurons).collect();
    ids.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let entries: Vec<InfluenceEntry> = ids
        .iter()
        .enumerate()
        .map(|(i, &neuron)| {
            let rank = (i + 1) as f64;
            let lift = if i < spec.plateau { spec.plateau_lift } else { 0.0 };
            let log_inf = spec.beta - spec.kappa * rank.ln() + lift + noise.sample(&mut rng);
            let influence = log_inf.exp();
            InfluenceEntry {
                neuron,
                influence,
                signed_delta: influence,
            }
        })
        .collect();
    let planted = ids[..spec.plateau].to_vec();
    Ok((InfluenceProfile::new(entries, TokenGroup::Rare, 0)?, planted))
}

/// `rank,neuron,influence,signed_delta,fitted,residual,regime` rows.
pub fn profile_csv(profile: &InfluenceProfile, fit: &PowerLawFit, labels: &RegimeLabels) -> String {
    let mut out = String::from("rank,neuron,influence,signed_delta,fitted,residual,regime\n");
    for (i, e) in profile.entries().iter().enumerate() {
        let rank = i + 1;
        let residual = fit.residuals.get(i).copied().flatten().map(|d| d.to_string()).unwrap_or_default();
        let regime = labels.labels.get(i).map(|l| l.1.as_str()).unwrap_or("");
        let _ = writeln!(
            out,
            "{rank},{},{},{},{},{residual},{regime}",
            e.neuron,
            e.influence,
            e.signed_delta,
            fit.fitted(rank).exp()
        );
    }
    out
}
